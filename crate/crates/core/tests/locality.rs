mod common;

use common::*;
use crowdcast::model::{PdfnModel, GRID_SIZE, PDFN_LATENT};

fn model_with_biases(seed: u64) -> PdfnModel {
    // non-zero biases so that constant terms cannot hide a leak
    let mut m = PdfnModel::pdfn(PDFN_LATENT, seed);
    for stage in [&mut m.encoder, &mut m.forecaster] {
        for t in stage.tensors_mut() {
            if t.ndim() == 1 {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * ((i % 7) as f32 - 3.0);
                }
            }
        }
    }
    m
}

#[test]
fn receptive_field_is_22_pixels_at_stride_8() {
    assert_eq!(receptive_range(0), (-7, 14));
    assert_eq!(receptive_range(3), (17, 38));
    for u in 0..GRID_SIZE {
        let (lo, hi) = receptive_range(u);
        assert_eq!(hi - lo + 1, 22);
        assert_eq!(lo, 8 * u as isize - 7);
    }
}

#[test]
fn encoder_changes_stay_inside_receptive_field() {
    let m = model_with_biases(1);
    let pixels: Vec<_> = pixel_lattice().into_iter().step_by(5).collect();
    let r = encoder_leakage(&m, &pixels, 2);
    assert_eq!(r.leaked, 0, "{r:?}");
    assert!(r.inside_changed > 0);
}

#[test]
fn forecaster_cells_are_independent() {
    let m = model_with_biases(3);
    let cells: Vec<_> = (0..GRID_SIZE).map(|i| (i, (i * 3 + 1) % GRID_SIZE)).chain([(3, 7)]).collect();
    let r = forecaster_leakage(&m, &cells, 4);
    assert_eq!(r.leaked, 0, "{r:?}");
    assert!(r.inside_changed > 0);
}

#[test]
fn isolated_cell_forecast_stays_at_that_cell() {
    // freshly initialized biases are zero, so untouched cells forecast exactly 0
    let m = PdfnModel::pdfn(PDFN_LATENT, 5);
    assert_eq!(forecaster_support(&m, 3, 7, 6), vec![(3, 7)]);
}
