//! Finite-difference check of the localizer loss gradients on random heads,
//! correlation maps and targets.
//!
//! cargo run --example gradient_check -- [draws]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spil::localizer::{
    gradient_check, prepare_target, propose_anchors, AnchorConfig, CellInputs, GridGeometry, HeadDims, HeadParams, MatchConfig,
    Target,
};
use spil::{BoundingBox, CorrelationMap, FeatureMap, Mask};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let draws: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let anchors_cfg = AnchorConfig::default();
    let (h, w, c) = (6, 6, 3);
    let anchors = propose_anchors(h, w, &anchors_cfg);
    let grid = GridGeometry {
        height: h,
        width: w,
        stride: anchors_cfg.stride,
    };
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let corr = CorrelationMap::from_map(FeatureMap::new(h, w, c, data)?);
        let inputs = CellInputs::new(&corr, 1);
        let dims = HeadDims {
            channels: c,
            context: 1,
            anchor_types: anchors_cfg.types(),
        };
        let values = (0..HeadParams::zeros(dims).values().len()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let head = HeadParams::from_values(dims, values)?;
        let target = if d % 4 == 3 {
            Target::negative(1.0)
        } else {
            let x = rng.random_range(0.0..20.0);
            let y = rng.random_range(0.0..20.0);
            let b = BoundingBox::new(x, y, x + rng.random_range(10.0..28.0), y + rng.random_range(10.0..28.0))?;
            let mask = Mask::from_box(48, 48, &b);
            Target::positive(b, Some(mask), rng.random_range(0.5..1.0))
        };
        let prepared = prepare_target(&anchors, anchors_cfg.types(), &target, grid, &MatchConfig::default(), &mut rng);
        let err = gradient_check(&head, &inputs, &prepared, 1e-5)?;
        println!("draw {d:3}  {} parameters  max relative error {err:.2e}", head.values().len());
        worst = worst.max(err);
    }
    println!("worst {worst:.2e}");
    Ok(())
}
