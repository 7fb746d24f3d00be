//! Trains the desk detector on 16 synthetic scenes and reports training-set
//! accuracy every 100 steps. Usage: `overfit [steps] [attention 0|1] [seed]`.

use std::time::Instant;

use textdet::detector::{detect, Detector, DetectorConfig, Trainer};
use textdet::geometry::IouMode;
use textdet::toolkit::{evaluate_detections, generate_scene, GenConfig, SceneSample};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let attention = args.get(2).is_none_or(|s| s != "0");
    let seed: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let mut cfg = DetectorConfig::desk();
    cfg.augment.enabled = false;
    cfg.attention.enabled = attention;
    let gen = GenConfig::default();
    let data: Vec<SceneSample> = (0..16).map(|i| generate_scene(i, &gen)).collect::<Result<_, _>>()?;
    let gts: Vec<_> = data.iter().map(|d| d.boxes.clone()).collect();
    let mut trainer = Trainer::new(Detector::new(cfg)?, seed)?;
    let start = Instant::now();
    let mut window = [0.0; 4];
    for s in 1..=steps {
        let l = trainer.train_on(&data)?.loss;
        for (w, v) in window.iter_mut().zip([l.total, l.cls, l.loc, l.attention]) {
            *w += v / 100.0;
        }
        if s % 100 == 0 {
            let mut dets = Vec::new();
            for chunk in data.chunks(4) {
                let imgs: Vec<_> = chunk.iter().map(|d| &d.image).collect();
                dets.extend(detect(
                    trainer.detector(),
                    &imgs,
                    trainer.params(),
                    &trainer.detector().config().inference,
                )?);
            }
            let rep = evaluate_detections(&dets, &gts, 0.5, IouMode::Rotated)?;
            println!(
                "step {s} loss {:.4} (cls {:.4} loc {:.4} attention {:.4}) P R F {} ({:.0}s)",
                window[0],
                window[1],
                window[2],
                window[3],
                rep.summary_line(),
                start.elapsed().as_secs_f64()
            );
            window = [0.0; 4];
        }
    }
    Ok(())
}
