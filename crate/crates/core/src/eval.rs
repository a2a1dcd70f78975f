//! Image-property metrics for generated batches and arm comparison.
//!
//! Images are in display range `[0, 1]`, HWC. The border ring is the
//! outermost frame (width 1 at 16×16, scaled with image size). A pixel
//! belongs to the subject when any channel deviates from the class
//! background by more than [`SUBJECT_THRESHOLD`].

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{border_pixels, SynthCondition};

pub const SUBJECT_THRESHOLD: f32 = 0.15;
pub const MAX_BACKGROUND_MSE: f64 = 0.01;
pub const MAX_CENTERING_ERROR: f64 = 2.0;
pub const MAX_ATTRIBUTE_FIDELITY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn ring_width(&self) -> usize {
        ((self.height.min(self.width) as f64 / 16.0).round() as usize).max(1)
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub class_id: usize,
    pub background_mse: f64,
    pub background_uniformity: f64,
    pub centering_error: Option<f64>,
    pub attribute_fidelity: Option<f64>,
    pub background_ok: bool,
    pub centering_ok: bool,
    pub passes: bool,
}

pub fn evaluate_image(
    img: &[f32],
    cond: &SynthCondition,
    background: f32,
    geom: ImageGeometry,
) -> Result<SampleMetrics> {
    let ImageGeometry { height: h, width: w, channels: c } = geom;
    if img.len() != geom.dim() {
        return Err(Error::Shape(format!("image has {} values, want {}", img.len(), geom.dim())));
    }
    let ring = border_pixels(h, w, geom.ring_width());
    let ring_vals: Vec<f64> = ring
        .iter()
        .flat_map(|&(y, x)| (0..c).map(move |ch| img[(y * w + x) * c + ch] as f64))
        .collect();
    let nr = ring.len() as f64;
    // mean over ring pixels of the per-pixel squared error summed over channels / channels
    let background_mse = ring_vals
        .iter()
        .map(|v| (v - background as f64).powi(2))
        .sum::<f64>()
        / (nr * c as f64);
    let rm = ring_vals.iter().sum::<f64>() / ring_vals.len() as f64;
    let background_uniformity =
        (ring_vals.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / ring_vals.len() as f64).sqrt();

    let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0usize);
    let mut color = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let px = &img[(y * w + x) * c..(y * w + x + 1) * c];
            if px.iter().any(|v| (v - background).abs() > SUBJECT_THRESHOLD) {
                sy += y as f64;
                sx += x as f64;
                n += 1;
                color.iter_mut().zip(px).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    let (centering_error, attribute_fidelity) = if n == 0 {
        (None, None)
    } else {
        let n = n as f64;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let ce = ((sy / n - cy).powi(2) + (sx / n - cx).powi(2)).sqrt();
        let af = color
            .iter()
            .enumerate()
            .map(|(ch, a)| (a / n - cond.color[ch % 3] as f64).powi(2))
            .sum::<f64>()
            / c as f64;
        (Some(ce), Some(af))
    };
    let background_ok = background_mse < MAX_BACKGROUND_MSE;
    let centering_ok = centering_error.is_some_and(|e| e < MAX_CENTERING_ERROR);
    let passes = background_ok
        && centering_ok
        && attribute_fidelity.is_some_and(|f| f < MAX_ATTRIBUTE_FIDELITY);
    Ok(SampleMetrics {
        class_id: cond.class.id(),
        background_mse,
        background_uniformity,
        centering_error,
        attribute_fidelity,
        background_ok,
        centering_ok,
        passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub arm: String,
    pub count: usize,
    pub background_mse: f64,
    pub background_uniformity: f64,
    /// Means over samples with a non-empty subject region.
    pub centering_error: f64,
    pub attribute_fidelity: f64,
    pub missing_subject: usize,
    pub property_pass_rate: f64,
    /// Fraction passing the background and centering thresholds.
    pub layout_pass_rate: f64,
    pub samples: Vec<SampleMetrics>,
}

/// Scores a batch. `class_backgrounds[c]` is the raw background of class `c`.
pub fn evaluate_batch(
    arm: &str,
    images: &[Vec<f32>],
    conditions: &[SynthCondition],
    class_backgrounds: &[f32],
    geom: ImageGeometry,
) -> Result<EvalReport> {
    if images.len() != conditions.len() {
        return Err(Error::Shape(format!(
            "{} images but {} conditions",
            images.len(),
            conditions.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty batch".into()));
    }
    let samples = images
        .iter()
        .zip(conditions)
        .map(|(img, cond)| {
            let bg = *class_backgrounds
                .get(cond.class.id())
                .ok_or_else(|| Error::Missing(format!("background for class {}", cond.class.id())))?;
            evaluate_image(img, cond, bg, geom)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let present: Vec<&SampleMetrics> = samples.iter().filter(|s| s.centering_error.is_some()).collect();
    let mean_present = |f: &dyn Fn(&SampleMetrics) -> f64| {
        if present.is_empty() {
            f64::NAN
        } else {
            present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(EvalReport {
        arm: arm.to_string(),
        count: samples.len(),
        background_mse: mean(&|s| s.background_mse),
        background_uniformity: mean(&|s| s.background_uniformity),
        centering_error: mean_present(&|s| s.centering_error.unwrap()),
        attribute_fidelity: mean_present(&|s| s.attribute_fidelity.unwrap()),
        missing_subject: samples.len() - present.len(),
        property_pass_rate: mean(&|s| s.passes as u8 as f64),
        layout_pass_rate: mean(&|s| (s.background_ok && s.centering_ok) as u8 as f64),
        samples,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_json(&v).ok_or_else(|| Error::format(path, "not an eval report"))
    }

    fn from_json(v: &serde_json::Value) -> Option<Self> {
        let f = |k: &str| match v.get(k)? {
            serde_json::Value::Null => Some(f64::NAN),
            x => x.as_f64(),
        };
        let samples = v
            .get("samples")?
            .as_array()?
            .iter()
            .map(|s| {
                Some(SampleMetrics {
                    class_id: s.get("class_id")?.as_u64()? as usize,
                    background_mse: s.get("background_mse")?.as_f64()?,
                    background_uniformity: s.get("background_uniformity")?.as_f64()?,
                    centering_error: s.get("centering_error")?.as_f64(),
                    attribute_fidelity: s.get("attribute_fidelity")?.as_f64(),
                    background_ok: s.get("background_ok")?.as_bool()?,
                    centering_ok: s.get("centering_ok")?.as_bool()?,
                    passes: s.get("passes")?.as_bool()?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            arm: v.get("arm")?.as_str()?.to_string(),
            count: v.get("count")?.as_u64()? as usize,
            background_mse: f("background_mse")?,
            background_uniformity: f("background_uniformity")?,
            centering_error: f("centering_error")?,
            attribute_fidelity: f("attribute_fidelity")?,
            missing_subject: v.get("missing_subject")?.as_u64()? as usize,
            property_pass_rate: f("property_pass_rate")?,
            layout_pass_rate: f("layout_pass_rate")?,
            samples,
        })
    }

    /// One row per sample.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8}"));
        let mut text = String::from(
            "index,class_id,background_mse,background_uniformity,centering_error,attribute_fidelity,passes\n",
        );
        for (i, s) in self.samples.iter().enumerate() {
            text.push_str(&format!(
                "{i},{},{:.8},{:.8},{},{},{}\n",
                s.class_id,
                s.background_mse,
                s.background_uniformity,
                opt(s.centering_error),
                opt(s.attribute_fidelity),
                s.passes as u8
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Canonical arm names.
pub const ARM_DDIM_NOISE: &str = "ddim_train+noise_inf";
pub const ARM_DDIM_MEAN: &str = "ddim_train+mean_offset_inf";
pub const ARM_OFFSET_MEAN: &str = "offset_train+mean_offset_inf";
pub const ARM_DDIM_CONTROL: &str = "ddim_train+control_inf";

/// Required relative reduction of background MSE from noise to mean-offset
/// initialization.
pub const MIN_OFFSET_INFERENCE_REDUCTION: f64 = 0.30;
pub const MIN_CONTROL_LAYOUT_PASS: f64 = 0.80;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRow {
    pub arm: String,
    pub background_mse: f64,
    pub background_uniformity: f64,
    pub centering_error: f64,
    pub attribute_fidelity: f64,
    pub property_pass_rate: f64,
    pub layout_pass_rate: f64,
    /// Differences against the first arm.
    pub delta_background_mse: f64,
    pub delta_attribute_fidelity: f64,
    pub delta_property_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ArmRow>,
    pub verdicts: Vec<Verdict>,
}

pub fn compare_arms(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two arms".into()));
    }
    let reference = &reports[0];
    for r in reports {
        let classes: Vec<usize> = r.samples.iter().map(|s| s.class_id).collect();
        let want: Vec<usize> = reference.samples.iter().map(|s| s.class_id).collect();
        if classes != want {
            return Err(Error::Config(format!(
                "arm `{}` was not evaluated on the same conditions as `{}`",
                r.arm, reference.arm
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| ArmRow {
            arm: r.arm.clone(),
            background_mse: r.background_mse,
            background_uniformity: r.background_uniformity,
            centering_error: r.centering_error,
            attribute_fidelity: r.attribute_fidelity,
            property_pass_rate: r.property_pass_rate,
            layout_pass_rate: r.layout_pass_rate,
            delta_background_mse: r.background_mse - reference.background_mse,
            delta_attribute_fidelity: r.attribute_fidelity - reference.attribute_fidelity,
            delta_property_pass_rate: r.property_pass_rate - reference.property_pass_rate,
        })
        .collect();
    let find = |name: &str| {
        reports.iter().find(|r| r.arm == name).or_else(|| {
            // any PCA-K offset arm stands in for the mean offset one
            let (train, init) = name.split_once('+')?;
            let offset = init.ends_with("_offset_inf");
            reports.iter().find(|r| {
                r.arm.split_once('+').is_some_and(|(t, i)| t == train && offset && i.ends_with("_offset_inf"))
            })
        })
    };
    let mut verdicts = Vec::new();
    if let (Some(noise), Some(mean)) = (find(ARM_DDIM_NOISE), find(ARM_DDIM_MEAN)) {
        let reduction = 1.0 - mean.background_mse / noise.background_mse;
        verdicts.push(Verdict {
            name: "mean_offset_inference_lowers_background_mse".into(),
            passed: mean.background_mse < noise.background_mse
                && reduction >= MIN_OFFSET_INFERENCE_REDUCTION,
            detail: format!(
                "noise {:.6} -> mean offset {:.6} ({:.1}% reduction, need >= {:.0}%)",
                noise.background_mse,
                mean.background_mse,
                100.0 * reduction,
                100.0 * MIN_OFFSET_INFERENCE_REDUCTION
            ),
        });
    }
    if let (Some(a), Some(b), Some(c)) = (find(ARM_DDIM_NOISE), find(ARM_DDIM_MEAN), find(ARM_OFFSET_MEAN)) {
        let bg = c.background_mse < a.background_mse && c.background_mse < b.background_mse;
        let pass = c.property_pass_rate > a.property_pass_rate && c.property_pass_rate > b.property_pass_rate;
        let fid = c.attribute_fidelity < a.attribute_fidelity && c.attribute_fidelity < b.attribute_fidelity;
        verdicts.push(Verdict {
            name: "offset_training_is_best_arm".into(),
            passed: bg && pass && fid,
            detail: format!(
                "background_mse {:.6}/{:.6}/{:.6} ({}), pass_rate {:.3}/{:.3}/{:.3} ({}), attribute_fidelity {:.6}/{:.6}/{:.6} ({})",
                a.background_mse, b.background_mse, c.background_mse, ok(bg),
                a.property_pass_rate, b.property_pass_rate, c.property_pass_rate, ok(pass),
                a.attribute_fidelity, b.attribute_fidelity, c.attribute_fidelity, ok(fid),
            ),
        });
    }
    if let Some(ctl) = find(ARM_DDIM_CONTROL) {
        verdicts.push(Verdict {
            name: "control_init_matches_training_layout".into(),
            passed: ctl.layout_pass_rate >= MIN_CONTROL_LAYOUT_PASS,
            detail: format!(
                "{:.1}% pass background+centering (need >= {:.0}%)",
                100.0 * ctl.layout_pass_rate,
                100.0 * MIN_CONTROL_LAYOUT_PASS
            ),
        });
    }
    Ok(Comparison { rows, verdicts })
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

impl Comparison {
    /// The metric rows without the verdict lines.
    pub fn rows_table(&self) -> String {
        let mut s = format!(
            "{:<32} {:>12} {:>10} {:>10} {:>12} {:>10}\n",
            "arm", "bg_mse", "bg_std", "center", "attr_fid", "pass_rate"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<32} {:>12.6} {:>10.5} {:>10.4} {:>12.6} {:>10.3}\n",
                r.arm, r.background_mse, r.background_uniformity, r.centering_error,
                r.attribute_fidelity, r.property_pass_rate
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = self.rows_table();
        for v in &self.verdicts {
            s.push_str(&format!(
                "[{}] {}: {}\n",
                if v.passed { "PASS" } else { "FAIL" },
                v.name,
                v.detail
            ));
        }
        s
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(json, e.to_string()))?;
        std::fs::write(json, text).map_err(|e| Error::io(json, e))?;
        let mut out = String::from(
            "arm,background_mse,background_uniformity,centering_error,attribute_fidelity,property_pass_rate,layout_pass_rate,delta_background_mse,delta_attribute_fidelity,delta_property_pass_rate\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.8},{:.8},{:.6}\n",
                r.arm, r.background_mse, r.background_uniformity, r.centering_error,
                r.attribute_fidelity, r.property_pass_rate, r.layout_pass_rate,
                r.delta_background_mse, r.delta_attribute_fidelity, r.delta_property_pass_rate
            ));
        }
        std::fs::write(csv, out).map_err(|e| Error::io(csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{class_backgrounds, render_raw, SynthClass};

    const G: ImageGeometry = ImageGeometry { height: 16, width: 16, channels: 3 };

    fn cond(class: SynthClass) -> SynthCondition {
        SynthCondition { class, color: [0.1, 0.4, 0.7], size: 0.5 }
    }

    #[test]
    fn perfect_training_images_pass() {
        for class in SynthClass::ALL {
            let c = cond(class);
            let img = render_raw(&c, 16, 16, 3);
            let m = evaluate_image(&img, &c, class.background(), G).unwrap();
            assert_eq!(m.background_mse, 0.0);
            assert!(m.centering_error.unwrap() <= 1.0);
            assert!(m.attribute_fidelity.unwrap() < 1e-12);
            assert!(m.passes);
        }
    }

    #[test]
    fn uniform_image_has_no_subject() {
        let c = cond(SynthClass::Product);
        let m = evaluate_image(&vec![0.5; 768], &c, 0.5, G).unwrap();
        assert!(m.centering_error.is_none() && m.attribute_fidelity.is_none());
        assert!(!m.passes);
        let r = evaluate_batch("x", &[vec![0.5; 768]], &[c], &[0.5, 0.5], G).unwrap();
        assert_eq!(r.missing_subject, 1);
        assert_eq!(r.property_pass_rate, 0.0);
    }

    #[test]
    fn corrupted_border_pixel_arithmetic() {
        let c = cond(SynthClass::Figure);
        let mut img = render_raw(&c, 16, 16, 3);
        let b = SynthClass::Figure.background();
        for ch in 0..3 {
            img[ch] = b + 0.5;
        }
        let m = evaluate_image(&img, &c, b, G).unwrap();
        let ring = border_pixels(16, 16, 1).len() as f64;
        assert_eq!(ring, 60.0);
        assert!((m.background_mse - 0.25 / ring).abs() < 1e-9);
    }

    #[test]
    fn identical_arms_have_zero_deltas_and_mismatched_sets_fail() {
        let c = cond(SynthClass::Product);
        let img = render_raw(&c, 16, 16, 3);
        let r = evaluate_batch("a", std::slice::from_ref(&img), &[c], &class_backgrounds(), G).unwrap();
        let mut r2 = r.clone();
        r2.arm = "b".into();
        let cmp = compare_arms(&[r.clone(), r2]).unwrap();
        for row in &cmp.rows {
            assert_eq!(row.delta_background_mse, 0.0);
            assert_eq!(row.delta_attribute_fidelity, 0.0);
            assert_eq!(row.delta_property_pass_rate, 0.0);
        }
        let other = cond(SynthClass::Figure);
        let r3 = evaluate_batch("c", &[render_raw(&other, 16, 16, 3)], &[other], &class_backgrounds(), G).unwrap();
        assert!(compare_arms(&[r.clone(), r3]).is_err());
        assert!(compare_arms(&[r]).is_err());
    }

    #[test]
    fn evaluation_is_repeatable_and_json_round_trips() {
        let c = cond(SynthClass::Product);
        let mut img = render_raw(&c, 16, 16, 3);
        img[100] = 0.33;
        let a = evaluate_batch("a", &[img.clone(), vec![1.0; 768]], &[c, c], &class_backgrounds(), G).unwrap();
        let b = evaluate_batch("a", &[img, vec![1.0; 768]], &[c, c], &class_backgrounds(), G).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        a.save_json(&p).unwrap();
        let back = EvalReport::load_json(&p).unwrap();
        assert_eq!(back.samples, a.samples);
        assert_eq!(back.background_mse, a.background_mse);
    }

    #[test]
    fn fidelity_ranks_candidates_deterministically() {
        // A candidate whose subject color equals the condition beats one that
        // is off by a scale factor, whatever the factor.
        let c = cond(SynthClass::Product);
        let exact = render_raw(&c, 16, 16, 3);
        for scale in [0.5f32, 0.8, 1.2] {
            let off = SynthCondition { color: c.color.map(|v| v * scale), ..c };
            let shifted = render_raw(&off, 16, 16, 3);
            let m0 = evaluate_image(&exact, &c, 1.0, G).unwrap();
            let m1 = evaluate_image(&shifted, &c, 1.0, G).unwrap();
            assert!(m0.attribute_fidelity.unwrap() < m1.attribute_fidelity.unwrap());
            let m1b = evaluate_image(&shifted, &off, 1.0, G).unwrap();
            assert!(m1b.attribute_fidelity.unwrap() < 1e-12);
        }
    }
}
