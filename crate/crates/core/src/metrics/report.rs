use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Means over a set of refined (or coarse) views against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l2: f64,
    pub lpips_proxy: f64,
    pub id_proxy: f64,
}

impl MetricSummary {
    fn values(&self) -> [f64; 5] {
        [
            self.psnr,
            self.ssim,
            self.l2,
            self.lpips_proxy,
            self.id_proxy,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub r: f32,
    pub refined: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub yaw: f32,
    pub refined: MetricSummary,
    pub coarse: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Median coarse-view production time per view.
    pub registration_ms: f64,
    /// Median encode + noise + U-Net + decode time per view.
    pub generation_ms: f64,
    pub trials: usize,
    pub unet_forwards_per_call: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Which scores are learned stand-ins rather than the standard metrics.
    pub proxy_note: String,
    pub refined: Option<MetricSummary>,
    pub coarse: Option<MetricSummary>,
    pub per_view: Vec<MetricSummary>,
    pub fid_proxy: Option<f64>,
    pub noise: Vec<NoiseRow>,
    pub angles: Vec<AngleRow>,
    pub timing: Option<Timing>,
}

pub(crate) const PROXY_NOTE: &str =
    "lpips_proxy uses codec-encoder features, id_proxy and fid_proxy use the \
trained synthetic-identity embedder; none is comparable to LPIPS, ArcFace or Inception-FID numbers";

impl EvalReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        EvalReport {
            config_hash: config_hash.into(),
            proxy_note: PROXY_NOTE.into(),
            ..Default::default()
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let summaries = self
            .refined
            .iter()
            .chain(&self.coarse)
            .chain(&self.per_view)
            .chain(self.noise.iter().map(|r| &r.refined))
            .chain(self.angles.iter().flat_map(|r| [&r.refined, &r.coarse]));
        let mut all: Vec<f64> = summaries.flat_map(|s| s.values()).collect();
        all.extend(self.fid_proxy);
        if let Some(t) = &self.timing {
            all.extend([t.registration_ms, t.generation_ms]);
        }
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: 0,
                msg: "evaluation produced a non-finite metric".into(),
            });
        }
        Ok(())
    }

    pub fn noise_csv(&self) -> String {
        let mut s = String::from("r,psnr,ssim,l2,lpips_proxy,id_proxy,count\n");
        for row in &self.noise {
            let m = &row.refined;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                row.r, m.psnr, m.ssim, m.l2, m.lpips_proxy, m.id_proxy, m.count
            );
        }
        s
    }

    pub fn angle_csv(&self) -> String {
        let mut s = String::from("yaw,ssim,lpips_proxy,id_proxy,l2,psnr,coarse_ssim,coarse_lpips_proxy,coarse_id_proxy,coarse_l2,coarse_psnr\n");
        for row in &self.angles {
            let (m, c) = (&row.refined, &row.coarse);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                row.yaw,
                m.ssim,
                m.lpips_proxy,
                m.id_proxy,
                m.l2,
                m.psnr,
                c.ssim,
                c.lpips_proxy,
                c.id_proxy,
                c.l2,
                c.psnr
            );
        }
        s
    }

    /// Writes `<stem>.json` plus one CSV per non-empty table.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        self.check_finite()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(
            format!("{stem}.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        if !self.noise.is_empty() {
            write(format!("{stem}_noise.csv"), self.noise_csv())?;
        }
        if !self.angles.is_empty() {
            write(format!("{stem}_angles.csv"), self.angle_csv())?;
        }
        Ok(())
    }
}
