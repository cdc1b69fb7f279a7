//! Deterministic scene sampling. Every record draws from its own
//! `SeedRng::indexed(seed, "scene", i)` stream, so records are independent
//! of each other and of how many are generated.

use drivecap_tensor::SeedRng;

use crate::error::{Result, SceneError};
use crate::render::{draw_background, draw_shape, DISTRACTOR_COLORS};
use crate::templates::caption_for;
use crate::types::{
    Category, ColBand, NormBox, ObjectAttrs, ObjectColor, Raster, RowBand, SceneRecord, Scenario,
    HI_SIDE, LO_SIDE,
};

/// Box-area sampling bands: small boxes are rarer than medium/large so the
/// regression task stays learnable while still populating every size bucket
/// well past the 10% floor.
const AREA_BANDS: [(f64, f64, f64); 3] = [
    (0.2, 0.002, 0.01),  // small
    (0.4, 0.01, 0.1),    // medium
    (0.4, 0.1, 0.3),     // large
];

/// The light half of generation: everything about a scene except pixels.
/// Exposed so statistical tests over thousands of scenes stay cheap.
pub fn sample_layout(seed: u64, index: usize) -> (Scenario, ObjectAttrs, NormBox) {
    let mut rng = SeedRng::indexed(seed, "scene-layout", index as u64);
    let scenario = Scenario::ALL[rng.below(3) as usize];
    let category = Category::ALL[rng.below(6) as usize];
    let color = ObjectColor::ALL[rng.below(6) as usize];

    let toss = rng.uniform();
    let mut acc = 0.0;
    let mut band = AREA_BANDS[2];
    for b in AREA_BANDS {
        acc += b.0;
        if toss < acc {
            band = b;
            break;
        }
    }
    let area = rng.range(band.1, band.2);
    let aspect = rng.range(0.6, 1.8);
    let w = (area * aspect).sqrt();
    let h = area / w;
    let margin = 0.01;
    let x = rng.range(w / 2.0 + margin, 1.0 - w / 2.0 - margin);
    let y = rng.range(h / 2.0 + margin, 1.0 - h / 2.0 - margin);
    let box_ = NormBox { x, y, w, h };

    let attrs = ObjectAttrs {
        category,
        color,
        row: RowBand::from_y(y),
        col: ColBand::from_x(x),
    };
    (scenario, attrs, box_)
}

/// Generate the full record at `index`, pixels included.
pub fn generate_one(seed: u64, index: usize) -> SceneRecord {
    let (scenario, attrs, box_) = sample_layout(seed, index);
    let mut rng = SeedRng::indexed(seed, "scene-pixels", index as u64);

    let mut lo = Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0]);
    let mut hi = Raster::filled(HI_SIDE, HI_SIDE, [0, 0, 0]);
    draw_background(&mut lo, scenario);
    draw_background(&mut hi, scenario);

    // Distractors: muted, never overlapping the risk box.
    let n_distractors = 2 + rng.below(3) as usize;
    for d in 0..n_distractors {
        let rgb = DISTRACTOR_COLORS[(d + rng.below(4) as usize) % DISTRACTOR_COLORS.len()];
        for _attempt in 0..25 {
            let area = rng.range(0.004, 0.04);
            let aspect = rng.range(0.6, 1.8);
            let w = (area * aspect).sqrt();
            let h = area / w;
            let x = rng.range(w / 2.0 + 0.01, 1.0 - w / 2.0 - 0.01);
            let y = rng.range(h / 2.0 + 0.01, 1.0 - h / 2.0 - 0.01);
            let candidate = NormBox { x, y, w, h };
            if !candidate.overlaps(&box_) {
                let ellipse = rng.uniform() < 0.5;
                draw_shape(&mut lo, &candidate, ellipse, rgb);
                draw_shape(&mut hi, &candidate, ellipse, rgb);
                break;
            }
        }
    }

    // The risk object goes on top so its box region is exactly its color.
    draw_shape(&mut lo, &box_, attrs.category.is_ellipse(), attrs.color.rgb());
    draw_shape(&mut hi, &box_, attrs.category.is_ellipse(), attrs.color.rgb());

    SceneRecord {
        id: format!("scene-{index:05}"),
        scenario,
        caption: caption_for(scenario, attrs),
        box_,
        object_attrs: attrs,
        raster_lo: lo,
        raster_hi: hi,
    }
}

/// Materialize `n` records. For large corpora prefer driving
/// [`generate_one`] in a streaming loop — rasters add up fast.
pub fn generate(seed: u64, n: usize) -> Result<Vec<SceneRecord>> {
    if n == 0 {
        return Err(SceneError::BadCount(0));
    }
    Ok((0..n).map(|i| generate_one(seed, i)).collect())
}

/// Deterministic shuffled partition into (train, val, test).
pub fn split(
    records: Vec<SceneRecord>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>, Vec<SceneRecord>)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(SceneError::BadFractions(fractions));
    }
    let n = records.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    SeedRng::named(seed, "split").shuffle(&mut order);

    let mut slots: Vec<Option<SceneRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SceneRecord> {
        idx.iter().map(|&i| slots[i].take().expect("disjoint")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}
