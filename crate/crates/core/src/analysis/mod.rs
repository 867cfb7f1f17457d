//! Projections, cluster metrics and plot/table exports.

mod export;
mod metrics;
mod pca;
mod tsne;

pub use export::{
    csv_string, export_csv, export_scatter_svg, fmt_f64, projection_rows, read_csv, scatter_svg,
};
pub use metrics::{
    category_cosines, cluster_metrics, probe_accuracy, silhouette, LinearProbe, MetricReport,
    PROBE_RIDGE,
};
pub use pca::{pca_project, Pca};
pub use tsne::{
    joint_probabilities, kl_divergence, pca_projection, tsne_project, tsne_project_with,
    Projection2D, ProjectionMethod, TsneParams, TSNE_MAX_POINTS,
};
