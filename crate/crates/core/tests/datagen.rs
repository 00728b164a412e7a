//! Dataset construction properties: realistic class ratio, block-disjoint
//! splits, upsampling arithmetic.

use std::collections::BTreeSet;

use proptest::prelude::*;
use sscl_core::datagen::{
    generate_synthetic_region, split_dataset, tile_region, upsample_minority, Label, ManifestEntry, Split, SplitConfig,
    SynthConfig, TileDataset, TileOptions, Upsample,
};

#[test]
fn realized_ratio_tracks_the_target_over_seeds() {
    let cfg = SynthConfig::default();
    let opts = TileOptions::default();
    let mut fractions = Vec::new();
    for seed in 0..20 {
        let region = generate_synthetic_region(&cfg, seed).unwrap();
        let tiles = tile_region(&region.raster, &region.mask, &opts).unwrap();
        let ds = tiles.dataset();
        fractions.push(ds.count(Label::Positive) as f64 / ds.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((0.008..=0.012).contains(&mean), "mean positive fraction {mean}");
}

#[test]
fn same_seed_same_region() {
    let cfg = SynthConfig { canvas: 512, ..Default::default() };
    let a = generate_synthetic_region(&cfg, 5).unwrap();
    let b = generate_synthetic_region(&cfg, 5).unwrap();
    assert_eq!(a.raster.pixels, b.raster.pixels);
    assert_eq!(a.mask, b.mask);
    let c = generate_synthetic_region(&cfg, 6).unwrap();
    assert_ne!(a.raster.pixels, c.raster.pixels);
}

#[test]
fn tiling_a_512_canvas_at_64_gives_an_8_by_8_grid() {
    let cfg = SynthConfig { canvas: 512, ..Default::default() };
    let region = generate_synthetic_region(&cfg, 1).unwrap();
    let tiles = tile_region(&region.raster, &region.mask, &TileOptions::default()).unwrap();
    assert_eq!(tiles.grid, (8, 8));
    assert_eq!(tiles.tiles.len(), 64);
}

#[test]
fn table_one_upsampling() {
    let mut entries = Vec::new();
    for i in 0..4465 {
        entries.push(ManifestEntry {
            tile_id: format!("t{i}"),
            path: String::new(),
            block_id: 0,
            label: Some(if i < 193 { Label::Positive } else { Label::Negative }),
            split: Split::Train,
        });
    }
    let ds = TileDataset { entries };
    let up = upsample_minority(&ds, Upsample::Factor(16)).unwrap();
    assert_eq!(up.count(Label::Positive), 3088);
    assert_eq!(up.count(Label::Negative), 4272);
    assert_eq!(upsample_minority(&ds, Upsample::Factor(1)).unwrap(), ds);
}

fn synthetic_manifest(blocks: u32, per_block: u32, positive_every: u32) -> TileDataset {
    let mut entries = Vec::new();
    for b in 0..blocks {
        for t in 0..per_block {
            let i = b * per_block + t;
            entries.push(ManifestEntry {
                tile_id: format!("t{i:05}"),
                path: String::new(),
                block_id: b,
                label: Some(if i.is_multiple_of(positive_every) { Label::Positive } else { Label::Negative }),
                split: Split::Unsplit,
            });
        }
    }
    TileDataset { entries }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_share_no_block(
        blocks in 8u32..200,
        per_block in 1u32..6,
        labeled in 0.2f64..1.0,
        share in proptest::option::of(0.0f64..1.0),
        seed in any::<u64>(),
    ) {
        let ds = synthetic_manifest(blocks, per_block, 7);
        let cfg = SplitConfig { fractions: (0.6, 0.2, 0.2), labeled_fraction: labeled, positive_block_share: share, seed };
        let Ok(parts) = split_dataset(&ds, &cfg) else { return Ok(()) };
        let sets: Vec<BTreeSet<u32>> =
            [Split::Train, Split::Val, Split::Test, Split::Unlabeled].iter().map(|&s| parts.get(s).block_ids()).collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                prop_assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        let total: usize = [Split::Train, Split::Val, Split::Test, Split::Unlabeled].iter().map(|&s| parts.get(s).len()).sum();
        prop_assert_eq!(total, ds.len());
        prop_assert!(parts.unlabeled.entries.iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn balance_matches_negative_count(pos in 1usize..40, neg in 0usize..400) {
        let entries: Vec<ManifestEntry> = (0..pos + neg)
            .map(|i| ManifestEntry {
                tile_id: format!("t{i}"),
                path: String::new(),
                block_id: 0,
                label: Some(if i < pos { Label::Positive } else { Label::Negative }),
                split: Split::Train,
            })
            .collect();
        let up = upsample_minority(&TileDataset { entries }, Upsample::Balance).unwrap();
        prop_assert_eq!(up.count(Label::Positive), neg.max(pos));
        prop_assert_eq!(up.count(Label::Negative), neg);
    }
}
