//! Named traversal over weight structs that are generic in their leaf type.
//!
//! Weight structs are declared as `Foo<T = Tensor>`; binding them into a
//! [`Graph`](crate::Graph) maps every leaf to a [`Var`](crate::Var), and
//! gradients are read back by walking the bound copy with the same names.

use std::collections::BTreeMap;

use crate::numcore::Tensor;

macro_rules! param_tree {
    (
        $name:ident {
            $($leaf:ident),* $(,)?
        }
        $(lists { $($list:ident : $lty:ident),* $(,)? })?
    ) => {
        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&format!("{prefix}{}", stringify!($leaf)), &self.$leaf),)*
                    $($($list: self.$list.iter().enumerate()
                        .map(|(i, s)| s.map(&format!("{prefix}{}.{i}.", stringify!($list)), f))
                        .collect(),)*)?
                }
            }

            pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&format!("{prefix}{}", stringify!($leaf)), &self.$leaf);)*
                $($(for (i, s) in self.$list.iter().enumerate() {
                    s.for_each(&format!("{prefix}{}.{i}.", stringify!($list)), f);
                })*)?
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($leaf)), &mut self.$leaf);)*
                $($(for (i, s) in self.$list.iter_mut().enumerate() {
                    s.for_each_mut(&format!("{prefix}{}.{i}.", stringify!($list)), f);
                })*)?
            }
        }

        impl $name<crate::numcore::Tensor> {
            /// Graph inputs for every leaf; trainable leaves receive gradients.
            pub fn bind(&self, g: &mut crate::numcore::Graph, trainable: bool) -> $name<crate::numcore::Var> {
                self.map("", &mut |_, t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
            }

            pub fn param_count(&self) -> usize {
                let mut n = 0;
                self.for_each("", &mut |_, t| n += t.len());
                n
            }
        }

        impl $name<crate::numcore::Var> {
            /// Gradients of every bound leaf after a backward pass, keyed as
            /// `prefix + name`. Leaves that were never reached get zeros.
            pub fn collect_grads(&self, g: &crate::numcore::Graph, prefix: &str, out: &mut crate::params::GradMap) {
                self.for_each(prefix, &mut |name, v| {
                    let grad = g
                        .grad(*v)
                        .unwrap_or_else(|| crate::numcore::Tensor::zeros(g.shape(*v)));
                    out.insert(name.to_string(), grad);
                });
            }
        }
    };
}
pub(crate) use param_tree;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;
