use proptest::prelude::*;
use slidevec::clustering::{
    build_bag, elbow_select, kmeans_fit, read_bag, wcss_curve, write_bag, KmeansConfig,
};
use slidevec::features::FeatureMatrix;

fn dist2(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum()
}

fn points() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..4, 1usize..40).prop_flat_map(|(dim, n)| {
        prop::collection::vec(-10.0f32..10.0, n * dim)
            .prop_map(move |d| FeatureMatrix::new(n, dim, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_is_a_fixed_point(f in points(), k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(f.n_patches());
        let m = kmeans_fit(&f, k, seed, &KmeansConfig::default()).unwrap();
        let mut recomputed = 0.0;
        for (i, row) in f.rows().enumerate() {
            let own = dist2(row, m.centroid(m.assignments[i]));
            recomputed += own;
            for j in 0..k {
                prop_assert!(own <= dist2(row, m.centroid(j)) + 1e-9);
            }
        }
        prop_assert!((recomputed - m.wcss).abs() <= 1e-9 * recomputed.max(1.0));
        prop_assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
        let sizes = m.cluster_sizes();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(sizes.iter().sum::<usize>(), f.n_patches());
    }

    #[test]
    fn bag_rows_are_member_means(f in points(), k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(f.n_patches());
        let m = kmeans_fit(&f, k, seed, &KmeansConfig::default()).unwrap();
        let bag = build_bag(&m, &f, "s").unwrap();
        prop_assert_eq!(bag.means.n_patches(), k);
        for (j, members) in bag.member_map.iter().enumerate() {
            prop_assert_eq!(members.len(), bag.cluster_sizes[j]);
            for d in 0..f.dim() {
                let mean = members.iter().map(|&i| f.row(i)[d] as f64).sum::<f64>() / members.len() as f64;
                prop_assert!((bag.means.row(j)[d] as f64 - mean).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn k_equal_to_n_has_zero_wcss() {
    let f = FeatureMatrix::from_rows(&[[0.0f32, 1.0], [5.0, 5.0], [-3.0, 2.0]]).unwrap();
    assert_eq!(
        kmeans_fit(&f, 3, 1, &KmeansConfig::default()).unwrap().wcss,
        0.0
    );
    assert!(kmeans_fit(&f, 4, 1, &KmeansConfig::default()).is_err());
}

#[test]
fn wcss_curve_is_non_increasing_and_elbow_finds_blobs() {
    let mut rows = Vec::new();
    for (cx, cy) in [(0.0f32, 0.0f32), (20.0, 0.0), (10.0, 17.32)] {
        for i in 0..30 {
            let a = i as f32 * 0.7;
            rows.push([cx + 0.3 * a.cos(), cy + 0.3 * a.sin()]);
        }
    }
    let f = FeatureMatrix::from_rows(&rows).unwrap();
    let curve = wcss_curve(&f, 1, 8, 4, &KmeansConfig::default()).unwrap();
    assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    assert_eq!(elbow_select(&curve).unwrap(), 3);
}

#[test]
fn bag_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = FeatureMatrix::from_rows(&[[1.0f32], [1.5], [9.0], [10.0]]).unwrap();
    let m = kmeans_fit(&f, 2, 7, &KmeansConfig::default()).unwrap();
    let bag = build_bag(&m, &f, "slide_a").unwrap();
    let path = write_bag(dir.path(), &bag).unwrap();
    let back = read_bag(&path).unwrap();
    assert_eq!(back.means, bag.means);
    assert_eq!(back.member_map, bag.member_map);
    assert_eq!(back.slide_id, "slide_a");
}
