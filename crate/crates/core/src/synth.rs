//! Synthetic structured-image corpus.
//!
//! Two classes with canonical layouts: class 0 ("product") is a centered
//! filled rectangle on white, class 1 ("figure") is a centered vertical bar
//! with 3:1 aspect on light gray. The attribute vector (class one-hot, subject
//! RGB, subject size) plays the role of a text prompt.
//!
//! Pixels are stored HWC, row-major, normalized to `[-1, 1]` via `2x − 1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const COND_DIM: usize = 6;
pub const NUM_CLASSES: usize = 2;
pub const SIZE_RANGE: (f32, f32) = (0.25, 0.75);
/// Minimum max-channel distance between subject color and background, so the
/// subject is always separable from the background.
pub const MIN_COLOR_CONTRAST: f32 = 0.3;

const MAGIC: &[u8; 4] = b"DLSC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SynthClass {
    Product = 0,
    Figure = 1,
}

impl SynthClass {
    pub const ALL: [SynthClass; NUM_CLASSES] = [SynthClass::Product, SynthClass::Figure];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(SynthClass::Product),
            1 => Ok(SynthClass::Figure),
            _ => Err(Error::Config(format!("unknown class id {id}"))),
        }
    }

    /// Raw background value in `[0, 1]`.
    pub fn background(self) -> f32 {
        match self {
            SynthClass::Product => 1.0,
            SynthClass::Figure => 0.8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Product => "product",
            SynthClass::Figure => "figure",
        }
    }
}

/// Class backgrounds indexed by class id.
pub fn class_backgrounds() -> [f32; NUM_CLASSES] {
    SynthClass::ALL.map(SynthClass::background)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCondition {
    pub class: SynthClass,
    pub color: [f32; 3],
    pub size: f32,
}

impl SynthCondition {
    /// `one_hot(2) ⊕ color(3) ⊕ size(1)`.
    pub fn encode(&self) -> [f32; COND_DIM] {
        let mut e = [0.0; COND_DIM];
        e[self.class.id()] = 1.0;
        e[2..5].copy_from_slice(&self.color);
        e[5] = self.size;
        e
    }

    pub fn decode(e: &[f32]) -> Result<Self> {
        if e.len() != COND_DIM {
            return Err(Error::Shape(format!("condition length {} != {COND_DIM}", e.len())));
        }
        let class = match (e[0], e[1]) {
            (a, b) if a == 1.0 && b == 0.0 => SynthClass::Product,
            (a, b) if a == 0.0 && b == 1.0 => SynthClass::Figure,
            _ => return Err(Error::Config(format!("bad class one-hot {:?}", &e[..2]))),
        };
        Ok(Self {
            class,
            color: [e[2], e[3], e[4]],
            size: e[5],
        })
    }

    /// Subject extent `(height, width)` in pixels for an `h × w` canvas.
    pub fn subject_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let sh = (self.size * h as f32).round() as usize;
        match self.class {
            SynthClass::Product => (sh, (self.size * w as f32).round() as usize),
            SynthClass::Figure => (sh, ((sh as f32 / 3.0).round() as usize).max(1)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(class: SynthClass, rng: &mut R) -> Self {
        let bg = class.background();
        let color = loop {
            let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            if c.iter().any(|v| (v - bg).abs() > MIN_COLOR_CONTRAST) {
                break c;
            }
        };
        let size = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
        Self { class, color, size }
    }
}

/// Renders the raw `[0, 1]` HWC image for a condition.
pub fn render_raw(cond: &SynthCondition, h: usize, w: usize, c: usize) -> Vec<f32> {
    let bg = cond.class.background();
    let mut img = vec![bg; h * w * c];
    let (sh, sw) = cond.subject_extent(h, w);
    let (r0, c0) = ((h - sh.min(h)) / 2, (w - sw.min(w)) / 2);
    for y in r0..(r0 + sh).min(h) {
        for x in c0..(c0 + sw).min(w) {
            for ch in 0..c {
                img[(y * w + x) * c + ch] = cond.color[ch % 3];
            }
        }
    }
    img
}

pub fn normalize(raw: &[f32]) -> Vec<f32> {
    raw.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn denormalize(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| (v + 1.0) * 0.5).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    /// Normalized HWC pixels.
    pub pixels: Vec<f32>,
    pub condition: SynthCondition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Upper bound on `H·W·C` per record.
    pub max_record_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_class: 2000,
            height: 16,
            width: 16,
            channels: 3,
            max_record_len: 1 << 20,
        }
    }
}

/// An in-memory corpus; serialized as the `DLSC` binary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<SynthImage>,
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Config(format!(
            "image side must be at least 8, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    if cfg.channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    cfg.height
        .checked_mul(cfg.width)
        .and_then(|v| v.checked_mul(cfg.channels))
        .filter(|&v| v <= cfg.max_record_len)
        .ok_or_else(|| {
            Error::Config(format!(
                "record {}x{}x{} exceeds the size cap {}",
                cfg.height, cfg.width, cfg.channels, cfg.max_record_len
            ))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.n_per_class * NUM_CLASSES);
    for _ in 0..cfg.n_per_class {
        for class in SynthClass::ALL {
            let condition = SynthCondition::sample(class, &mut rng);
            let raw = render_raw(&condition, cfg.height, cfg.width, cfg.channels);
            images.push(SynthImage {
                pixels: normalize(&raw),
                condition,
            });
        }
    }
    Ok(Corpus {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        images,
    })
}

/// Spatial-average statistics: `μ = E[a·x]`, `σ² = Var[a·x]` (population).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SpatialStats {
    pub count: usize,
    pub mu: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ClassStats {
    pub class_id: usize,
    pub spatial: SpatialStats,
    #[serde(skip)]
    pub mean_image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CorpusStats {
    pub overall: SpatialStats,
    pub classes: Vec<ClassStats>,
}

/// `a·x` with `a = (1/d)·1`.
pub fn spatial_mean(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

pub fn spatial_stats<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> SpatialStats {
    let means: Vec<f64> = images.into_iter().map(spatial_mean).collect();
    let n = means.len();
    let mu = means.iter().sum::<f64>() / n as f64;
    let sigma2 = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n as f64;
    SpatialStats { count: n, mu, sigma2 }
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.images.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let overall = spatial_stats(corpus.images.iter().map(|i| i.pixels.as_slice()));
    let d = corpus.dim();
    let mut classes = Vec::new();
    for class in SynthClass::ALL {
        let members: Vec<&SynthImage> = corpus.class_images(class).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean_image = vec![0.0f64; d];
        for img in &members {
            for (m, &v) in mean_image.iter_mut().zip(&img.pixels) {
                *m += v as f64;
            }
        }
        mean_image.iter_mut().for_each(|m| *m /= members.len() as f64);
        classes.push(ClassStats {
            class_id: class.id(),
            spatial: spatial_stats(members.iter().map(|i| i.pixels.as_slice())),
            mean_image,
        });
    }
    Ok(CorpusStats { overall, classes })
}

impl Corpus {
    pub fn new(height: usize, width: usize, channels: usize, images: Vec<SynthImage>) -> Result<Self> {
        let d = height * width * channels;
        if let Some(bad) = images.iter().find(|i| i.pixels.len() != d) {
            return Err(Error::Shape(format!(
                "image has {} values, expected {d}",
                bad.pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            images,
        })
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_images(&self, class: SynthClass) -> impl Iterator<Item = &SynthImage> {
        self.images.iter().filter(move |i| i.condition.class == class)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for img in &self.images {
            counts[img.condition.class.id()] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(36 + self.len() * (COND_DIM + d) * 4);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.len() as u32,
            NUM_CLASSES as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in self.class_counts() {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for img in &self.images {
            for v in img.condition.encode().iter().chain(&img.pixels) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut next = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header".into()))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = next()?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (height, width, channels, count, n_classes) = (next()?, next()?, next()?, next()?, next()?);
        let counts: Vec<usize> = (0..n_classes).map(|_| next()).collect::<Result<_>>()?;
        let header_len = 4 + 4 * (6 + n_classes);
        let d = height * width * channels;
        let payload = &bytes[header_len..];
        if payload.len() != count * (COND_DIM + d) * 4 {
            return Err(bad(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                count * (COND_DIM + d) * 4
            )));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let images = floats
            .chunks_exact(COND_DIM + d)
            .map(|rec| {
                Ok(SynthImage {
                    condition: SynthCondition::decode(&rec[..COND_DIM])?,
                    pixels: rec[COND_DIM..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = Corpus {
            height,
            width,
            channels,
            images,
        };
        if corpus.class_counts().as_slice() != counts.as_slice() {
            return Err(bad("class counts disagree with records".into()));
        }
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes record `index` as a PPM (display range `[0, 1]`).
    pub fn export_ppm(&self, index: usize, path: &Path) -> Result<()> {
        let img = self
            .images
            .get(index)
            .ok_or_else(|| Error::Config(format!("record {index} out of range")))?;
        let raw: Vec<f32> = img.pixels.iter().map(|&v| crate::ppm::to_display(v)).collect();
        crate::ppm::write(path, self.height, self.width, self.channels, &raw)
    }
}

/// Indices of the outermost ring of pixels of width `ring` on an `h × w` grid.
pub fn border_pixels(h: usize, w: usize, ring: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if y < ring || x < ring || y + ring >= h || x + ring >= w {
                out.push((y, x));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(class: SynthClass, color: [f32; 3], size: f32) -> SynthCondition {
        SynthCondition { class, color, size }
    }

    #[test]
    fn product_rectangle_geometry() {
        let c = cond(SynthClass::Product, [0.0, 0.2, 0.4], 0.5);
        let raw = render_raw(&c, 16, 16, 3);
        let inside = |y: usize, x: usize| (4..12).contains(&y) && (4..12).contains(&x);
        for y in 0..16 {
            for x in 0..16 {
                let px = &raw[(y * 16 + x) * 3..(y * 16 + x) * 3 + 3];
                if inside(y, x) {
                    assert_eq!(px, &[0.0, 0.2, 0.4]);
                } else {
                    assert_eq!(px, &[1.0, 1.0, 1.0]);
                }
            }
        }
        for (y, x) in border_pixels(16, 16, 1) {
            assert_eq!(raw[(y * 16 + x) * 3], 1.0);
        }
    }

    #[test]
    fn figure_bar_geometry() {
        let c = cond(SynthClass::Figure, [0.0, 0.0, 0.0], 0.75);
        assert_eq!(c.subject_extent(16, 16), (12, 4));
        let raw = render_raw(&c, 16, 16, 3);
        let dark = raw.chunks(3).filter(|p| p[0] == 0.0).count();
        assert_eq!(dark, 48);
        assert_eq!(raw[0], 0.8);
        // rows 2..14, cols 6..10
        assert_eq!(raw[(2 * 16 + 6) * 3], 0.0);
        assert_eq!(raw[(13 * 16 + 9) * 3], 0.0);
        assert_eq!(raw[(1 * 16 + 6) * 3], 0.8);
        assert_eq!(raw[(2 * 16 + 5) * 3], 0.8);
    }

    #[test]
    fn generated_images_are_centered_with_clean_borders() {
        let corpus = generate_corpus(&SynthConfig {
            seed: 3,
            n_per_class: 50,
            ..Default::default()
        })
        .unwrap();
        let (h, w) = (corpus.height, corpus.width);
        for img in &corpus.images {
            let bg = 2.0 * img.condition.class.background() - 1.0;
            for (y, x) in border_pixels(h, w, 1) {
                for ch in 0..3 {
                    assert_eq!(img.pixels[(y * w + x) * 3 + ch], bg);
                }
            }
            let (mut ys, mut xs) = (vec![], vec![]);
            for y in 0..h {
                for x in 0..w {
                    if img.pixels[(y * w + x) * 3..(y * w + x) * 3 + 3] != [bg, bg, bg] {
                        ys.push(y);
                        xs.push(x);
                    }
                }
            }
            let cy = (ys.iter().min().unwrap() + ys.iter().max().unwrap()) as f32 / 2.0;
            let cx = (xs.iter().min().unwrap() + xs.iter().max().unwrap()) as f32 / 2.0;
            assert!((cy - 7.5).abs() <= 1.0 && (cx - 7.5).abs() <= 1.0);
            assert!((0.25..=0.75).contains(&img.condition.size));
            assert!(img.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(corpus.class_counts(), [50, 50]);
    }

    #[test]
    fn generation_is_deterministic_and_file_is_bit_identical() {
        let cfg = SynthConfig {
            seed: 11,
            n_per_class: 20,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap().to_bytes();
        let b = generate_corpus(&cfg).unwrap().to_bytes();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        generate_corpus(&cfg).unwrap().save(&p).unwrap();
        let meta = std::fs::metadata(&p).unwrap();
        assert_eq!(meta.len() as usize, 4 + 4 * 8 + 40 * (6 + 768) * 4);
        let back = Corpus::load(&p).unwrap();
        assert_eq!(back, generate_corpus(&cfg).unwrap());
    }

    #[test]
    fn rejects_bad_configs_and_files() {
        let small = SynthConfig {
            height: 7,
            ..Default::default()
        };
        assert!(generate_corpus(&small).is_err());
        let capped = SynthConfig {
            max_record_len: 100,
            ..Default::default()
        };
        assert!(generate_corpus(&capped).is_err());
        let none = SynthConfig {
            n_per_class: 0,
            ..Default::default()
        };
        assert!(generate_corpus(&none).is_err());

        let corpus = generate_corpus(&SynthConfig {
            n_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let mut bytes = corpus.to_bytes();
        bytes.pop();
        assert!(Corpus::from_bytes(&bytes, Path::new("x")).is_err());
        let mut bytes = corpus.to_bytes();
        bytes[0] = b'X';
        assert!(Corpus::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn stats_of_identical_and_pair_corpora() {
        let c = cond(SynthClass::Product, [0.1, 0.2, 0.3], 0.5);
        let v = normalize(&render_raw(&c, 8, 8, 3));
        let same = Corpus::new(
            8,
            8,
            3,
            vec![
                SynthImage { pixels: v.clone(), condition: c },
                SynthImage { pixels: v.clone(), condition: c },
            ],
        )
        .unwrap();
        let s = corpus_stats(&same).unwrap();
        assert!((s.overall.mu - spatial_mean(&v)).abs() < 1e-12);
        assert_eq!(s.overall.sigma2, 0.0);

        let a = vec![0.5f32; 192];
        let b = vec![-0.25f32; 192];
        let pair = Corpus::new(
            8,
            8,
            3,
            vec![
                SynthImage { pixels: a, condition: c },
                SynthImage { pixels: b, condition: c },
            ],
        )
        .unwrap();
        let s = corpus_stats(&pair).unwrap();
        let mu = (0.5 - 0.25) / 2.0;
        assert!((s.overall.mu - mu).abs() < 1e-12);
        let var = ((0.5 - mu).powi(2) + (-0.25 - mu).powi(2)) / 2.0;
        assert!((s.overall.sigma2 - var).abs() < 1e-12);

        let white = Corpus::new(
            8,
            8,
            3,
            vec![SynthImage { pixels: normalize(&[1.0; 192]), condition: c }],
        )
        .unwrap();
        assert_eq!(corpus_stats(&white).unwrap().overall.mu, 1.0);
    }

    #[test]
    fn default_corpus_premises() {
        let corpus = generate_corpus(&SynthConfig {
            n_per_class: 200,
            ..Default::default()
        })
        .unwrap();
        let s = corpus_stats(&corpus).unwrap();
        assert!(s.overall.mu.abs() > 0.1, "mu = {}", s.overall.mu);
        let diff = (s.classes[0].spatial.mu - s.classes[1].spatial.mu).abs();
        assert!(diff > 0.05, "class means differ by {diff}");
    }

    #[test]
    fn condition_round_trip() {
        let c = cond(SynthClass::Figure, [0.3, 0.6, 0.9], 0.4);
        assert_eq!(c.encode(), [0.0, 1.0, 0.3, 0.6, 0.9, 0.4]);
        assert_eq!(SynthCondition::decode(&c.encode()).unwrap(), c);
        assert!(SynthCondition::decode(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.5]).is_err());
    }
}
