//! Per-slide k-means over patch features, elbow selection of `k`, and the
//! cluster-mean bag representation.

mod bag;
mod elbow;
mod kmeans;

pub use bag::{bag_path, build_bag, list_bags, read_bag, write_bag, BagRepresentation};
pub use elbow::{elbow_select, second_differences, DEFAULT_K};
pub use kmeans::{kmeans_fit, kmeans_from, wcss_curve, ClusterModel, KmeansConfig};
