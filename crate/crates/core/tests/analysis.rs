mod common;

use common::token_ids;
use proptest::prelude::*;
use sattn_core::analysis::{
    capture_record, segment_groups, similarity_surface, variance_surface, weighted_cumulative_variance,
    AttentionRecord, HeadAggregation, SampleAggregation, SimilaritySurface, VarianceSurface,
};
use sattn_core::model::TOY_SEED;
use sattn_core::{Matrix, ModelConfig, RowStochasticMatrix, SharingPlan, Span, Weights};

fn rsm(rows: &[&[f32]]) -> RowStochasticMatrix {
    RowStochasticMatrix::from_matrix(
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
    )
    .unwrap()
}

/// Three layers, two samples of lengths 2 and 3, one head each.
fn fixture() -> Vec<AttentionRecord> {
    let s0 = vec![
        vec![rsm(&[&[1.0, 0.0], &[0.5, 0.5]])],
        vec![rsm(&[&[1.0, 0.0], &[0.5, 0.5]])],
        vec![rsm(&[&[1.0, 0.0], &[0.0, 1.0]])],
    ];
    let s1 = vec![
        vec![rsm(&[&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0], &[0.2, 0.3, 0.5]])],
        vec![rsm(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.2, 0.3, 0.5]])],
        vec![RowStochasticMatrix::diagonal(3)],
    ];
    // deliberately out of order: reductions must sort by sample id
    vec![
        AttentionRecord::new(1, s1).unwrap(),
        AttentionRecord::new(0, s0).unwrap(),
    ]
}

// Expected values computed by hand-coded f64 padding, averaging and cosine.
const MEAN_MATRICES: [[f64; 3]; 3] = [
    [1.0, 0.962_977_456_327_690_4, 0.857_791_547_670_303_9],
    [0.962_977_456_327_690_4, 1.0, 0.698_951_780_691_104_6],
    [0.857_791_547_670_303_9, 0.698_951_780_691_104_6, 1.0],
];
const MEAN_SIMILARITIES: [[f64; 3]; 3] = [
    [1.0, 0.944_386_083_936_748_3, 0.854_088_662_425_478_9],
    [0.944_386_083_936_748_3, 1.0, 0.713_693_147_604_139_3],
    [0.854_088_662_425_478_9, 0.713_693_147_604_139_3, 1.0],
];
const POOLED_VARIANCE: [f64; 3] = [
    0.066_913_580_246_913_57,
    0.122_469_135_802_469_14,
    0.246_913_580_246_913_6,
];

fn assert_surface(s: &SimilaritySurface, want: &[[f64; 3]; 3]) {
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let got = f64::from(s.get(i, j));
            assert!((got - w).abs() <= 1e-6, "({i},{j}): {got} vs {w}");
        }
    }
}

#[test]
fn similarity_fixture_both_aggregations() {
    let records = fixture();
    let s = similarity_surface(&records, HeadAggregation::Mean, SampleAggregation::MeanMatrices).unwrap();
    assert_surface(&s, &MEAN_MATRICES);
    let s = similarity_surface(&records, HeadAggregation::PerHead(0), SampleAggregation::MeanSimilarities)
        .unwrap();
    assert_surface(&s, &MEAN_SIMILARITIES);
}

#[test]
fn variance_fixture_and_cumulative_form() {
    let v = variance_surface(&fixture()).unwrap();
    for (l, &want) in POOLED_VARIANCE.iter().enumerate() {
        assert!((f64::from(v.get(l, 0)) - want).abs() <= 1e-6);
    }
    let w = weighted_cumulative_variance(&v).unwrap();
    let suffix: Vec<f64> = (0..3).map(|l| POOLED_VARIANCE[l..].iter().sum()).collect();
    let mean = suffix.iter().sum::<f64>() / 3.0;
    for (l, s) in suffix.iter().enumerate() {
        assert!((f64::from(w.get(l, 0)) - s / mean).abs() <= 1e-6);
    }
}

#[test]
fn uniform_attention_variance() {
    // entries 1/(i+1), repeated i+1 times, for T = 4: variance 0.048333…
    let layer: Vec<RowStochasticMatrix> = vec![sattn_core::math::causal_softmax(&Matrix::zeros(4, 4), 1.0).unwrap(); 2];
    let rec = AttentionRecord::new(0, vec![layer]).unwrap();
    let v = variance_surface(&[rec]).unwrap();
    let entries: Vec<f64> = (1..=4).flat_map(|n| std::iter::repeat_n(1.0 / n as f64, n)).collect();
    let mean = entries.iter().sum::<f64>() / entries.len() as f64;
    let want = entries.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / entries.len() as f64;
    assert!((want - 0.048_333_333_333_333_33).abs() < 1e-12);
    for h in 0..2 {
        assert!((f64::from(v.get(0, h)) - want).abs() <= 1e-6);
    }
}

#[test]
fn single_sample_aggregations_agree_exactly() {
    let one = vec![fixture().remove(0)];
    let a = similarity_surface(&one, HeadAggregation::Mean, SampleAggregation::MeanMatrices).unwrap();
    let b = similarity_surface(&one, HeadAggregation::Mean, SampleAggregation::MeanSimilarities).unwrap();
    assert_eq!(a, b);
}

/// Block-diagonal 32-layer surface: strong within {0,1}, {2..5}, {6..30}, {31}.
fn block_surface() -> SimilaritySurface {
    let block = |l: usize| match l {
        0..=1 => 0,
        2..=5 => 1,
        6..=30 => 2,
        _ => 3,
    };
    let data = (0..32 * 32)
        .map(|k| {
            let (i, j) = (k / 32, k % 32);
            if i == j {
                1.0
            } else if block(i) == block(j) {
                0.92
            } else {
                0.05
            }
        })
        .collect();
    SimilaritySurface::from_matrix(Matrix::new(32, 32, data).unwrap()).unwrap()
}

#[test]
fn block_surface_segments_into_four_groups() {
    let g = segment_groups(&block_surface(), 0.8).unwrap();
    let bounds: Vec<(usize, usize)> = g.groups.iter().map(|x| (x.start, x.end)).collect();
    assert_eq!(bounds, vec![(0, 1), (2, 5), (6, 30), (31, 31)]);
    assert!((g.groups[2].mean_similarity - 0.92).abs() < 1e-6);
}

#[test]
fn shared_span_is_visible_to_the_analyzer() {
    let config = ModelConfig::toy()
        .with_plan(SharingPlan::new(vec![Span::new(2, 6).unwrap()]).unwrap())
        .unwrap();
    let w = Weights::random(&config, TOY_SEED).unwrap();
    let records: Vec<AttentionRecord> = (0..3)
        .map(|id| capture_record(&config, &w, id, &token_ids(id as u64, 10 + id * 3, 256)).unwrap())
        .collect();
    for r in &records {
        assert_eq!(r.n_layers(), 8);
        assert_eq!(r.n_heads(), 4);
    }
    let s = similarity_surface(&records, HeadAggregation::Mean, SampleAggregation::MeanMatrices).unwrap();
    for i in 2..=6 {
        for j in 2..=6 {
            assert!((s.get(i, j) - 1.0).abs() <= 1e-6);
        }
    }
    let v = variance_surface(&records).unwrap();
    for l in 3..=6 {
        assert_eq!(v.as_matrix().row(l), v.as_matrix().row(2));
    }
}

proptest! {
    #[test]
    fn cumulative_variance_averages_to_one(rows in 1usize..12, heads in 1usize..5, seed in prop::collection::vec(0.001f32..1.0, 60)) {
        let data: Vec<f32> = (0..rows * heads).map(|k| seed[k % seed.len()]).collect();
        let vs = VarianceSurface::from_matrix(Matrix::new(rows, heads, data).unwrap()).unwrap();
        let w = weighted_cumulative_variance(&vs).unwrap();
        for h in 0..heads {
            let mean: f32 = (0..rows).map(|l| w.get(l, h)).sum::<f32>() / rows as f32;
            prop_assert!((mean - 1.0).abs() <= 1e-5);
            for l in 1..rows {
                prop_assert!(w.get(l, h) <= w.get(l - 1, h));
            }
        }
    }
}
