use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use autotcl::trainer::StepRecord;

#[derive(Debug, Clone, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_aug: Option<f64>,
    pub l_con: f64,
}

/// Step-averaged losses per epoch, in epoch order.
pub fn epoch_curves(steps: &[StepRecord]) -> Vec<EpochLoss> {
    let mut out: Vec<(usize, f64, usize, f64, usize)> = Vec::new();
    for s in steps {
        if out.last().is_none_or(|e| e.0 != s.epoch) {
            out.push((s.epoch, 0.0, 0, 0.0, 0));
        }
        let e = out.last_mut().expect("pushed");
        e.3 += s.losses.l_con;
        e.4 += 1;
        if let Some(a) = s.losses.l_aug {
            e.1 += a;
            e.2 += 1;
        }
    }
    out.into_iter()
        .map(|(epoch, a, na, c, nc)| EpochLoss {
            epoch,
            l_aug: (na > 0).then(|| a / na as f64),
            l_con: c / nc as f64,
        })
        .collect()
}

pub fn draw(curves: &[EpochLoss], path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let con: Vec<(f64, f64)> = curves.iter().map(|c| (c.epoch as f64, c.l_con)).collect();
    let aug: Vec<(f64, f64)> = curves
        .iter()
        .filter_map(|c| c.l_aug.map(|a| (c.epoch as f64, a)))
        .collect();
    let ys = con.iter().chain(&aug).map(|p| p.1);
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let x_max = (curves.last().map_or(0, |c| c.epoch) as f64).max(1.0);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training losses", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (lo - pad)..(hi + pad))?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw()?;
    chart
        .draw_series(LineSeries::new(con, &BLUE))?
        .label("contrastive loss")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    if !aug.is_empty() {
        chart
            .draw_series(LineSeries::new(aug, &RED))?
            .label("augmentation loss")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
