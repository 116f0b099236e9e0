//! Mean AP over IoU 0.50:0.95 on a few hand-made detections, for all objects
//! and for the small-object slice.

use mamat::eval::{map_evaluate, Bbox, Detection, GroundTruth, SizeFilter};

fn main() -> mamat::Result<()> {
    let gt = |image_id, class_id, b: [f64; 4]| -> mamat::Result<GroundTruth> {
        Ok(GroundTruth {
            image_id,
            class_id,
            bbox: Bbox::new(b[0], b[1], b[2], b[3])?,
        })
    };
    let det = |image_id, class_id, b: [f64; 4], score| -> mamat::Result<Detection> {
        Ok(Detection {
            image_id,
            class_id,
            bbox: Bbox::new(b[0], b[1], b[2], b[3])?,
            score,
        })
    };

    // One detection with IoU 0.6 against its ground truth: hits at 0.50,
    // 0.55 and 0.60 only, so mean AP is 0.3.
    let r = map_evaluate(&[det(0, 0, [0., 0., 6., 10.], 0.9)?], &[gt(0, 0, [0., 0., 10., 10.])?], SizeFilter::All)?;
    println!("IoU-0.6 fixture: per threshold {:?}", r.per_threshold);
    println!("IoU-0.6 fixture: mean AP {:.3}", r.mean.unwrap());

    let gts = vec![
        gt(0, 0, [10., 10., 30., 30.])?,
        gt(0, 1, [50., 50., 150., 120.])?,
        gt(1, 0, [5., 5., 20., 25.])?,
        gt(1, 1, [0., 0., 8., 8.])?,
    ];
    let dets = vec![
        det(0, 0, [11., 10., 31., 29.], 0.95)?,
        det(0, 1, [55., 48., 150., 125.], 0.80)?,
        det(1, 0, [40., 40., 60., 60.], 0.70)?,
        det(1, 0, [5., 6., 21., 25.], 0.60)?,
        det(1, 1, [1., 0., 8., 9.], 0.50)?,
    ];
    for filter in [SizeFilter::All, SizeFilter::Small] {
        let r = map_evaluate(&dets, &gts, filter)?;
        println!("{filter:?}: mean AP {:?}, per class {:?}", r.mean, r.per_class.keys().collect::<Vec<_>>());
    }
    Ok(())
}
