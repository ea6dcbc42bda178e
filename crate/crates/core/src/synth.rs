//! Procedural geo-tagged street world with exact view-overlap ground truth.
//!
//! The street is a line. Each side (heading +1 / -1) carries its own facade
//! texture: buildings made of random square/sine stripes plus sparse glyph
//! blocks that act as distinctive signage. A camera at position `x` sees the
//! facade interval `[x - w/2, x + w/2]` of the side it faces. Training
//! cameras live on the first half of the street, test cameras on the second.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::regions::{decompose_dims, RegionSet};
use crate::supervision::SoftLabelRecord;

/// Geographic radius for positives.
pub const POSITIVE_RADIUS: f64 = 10.0;
/// Geographic radius beyond which gallery images are negatives.
pub const NEGATIVE_RADIUS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    /// Street length in meters.
    pub street_length: f64,
    /// Meters of facade visible in one image.
    pub window_width: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub train_queries: usize,
    pub train_gallery: usize,
    pub test_queries: usize,
    pub test_gallery: usize,
    /// Fraction of cameras facing heading +1.
    pub forward_fraction: f64,
    /// Standard deviation of reported-position noise, meters.
    pub gps_noise: f64,
    /// Building widths are drawn uniformly from this range (meters).
    pub building_min: f64,
    pub building_max: f64,
    /// Number of distinct facade styles shared between buildings.
    pub styles: usize,
    pub stripes_per_style: usize,
    /// Expected glyph blocks per 100 m of facade.
    pub glyphs_per_100m: f64,
    /// Photometric change applied to query images: `gain * (p - 0.5) + 0.5 + offset`.
    pub query_gain: f64,
    pub query_offset: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 2020,
            street_length: 1000.0,
            window_width: 20.0,
            image_height: 32,
            image_width: 96,
            train_queries: 128,
            train_gallery: 512,
            test_queries: 512,
            test_gallery: 128,
            forward_fraction: 0.5,
            gps_noise: 5.0,
            building_min: 8.0,
            building_max: 24.0,
            styles: 6,
            stripes_per_style: 3,
            glyphs_per_100m: 6.0,
            query_gain: 0.8,
            query_offset: 0.05,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.street_length > 0.0) {
            return bad("street length must be positive");
        }
        if !(self.window_width > 0.0) || self.window_width >= self.street_length / 2.0 {
            return bad("window width must be positive and fit inside each half of the street");
        }
        if !(self.gps_noise >= 0.0) {
            return bad("gps noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.forward_fraction) {
            return bad("forward fraction must lie in [0, 1]");
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive");
        }
        if self.styles == 0 || self.stripes_per_style == 0 {
            return bad("need at least one style with one stripe");
        }
        if !(self.building_min > 0.0) || self.building_max < self.building_min {
            return bad("building width range is empty");
        }
        if self.train_queries == 0 || self.train_gallery == 0 || self.test_queries == 0 || self.test_gallery == 0 {
            return bad("every split needs at least one camera");
        }
        Ok(())
    }

    /// Fingerprint identifying views of the same world.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("world spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    TrainQuery,
    TrainGallery,
    TestQuery,
    TestGallery,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::TrainQuery,
        Split::TrainGallery,
        Split::TestQuery,
        Split::TestGallery,
    ];

    pub fn is_query(self) -> bool {
        matches!(self, Split::TrainQuery | Split::TestQuery)
    }

    pub fn is_train(self) -> bool {
        matches!(self, Split::TrainQuery | Split::TrainGallery)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainQuery => "train-query",
            Split::TrainGallery => "train-gallery",
            Split::TestQuery => "test-query",
            Split::TestGallery => "test-gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.to_string() == s)
            .ok_or_else(|| Error::Format(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoImage {
    pub id: usize,
    pub image: Image,
    pub true_x: f64,
    pub reported_x: f64,
    /// +1 or -1.
    pub heading: i8,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
struct Stripe {
    amplitude: f64,
    /// cycles per meter
    frequency: f64,
    phase: f64,
    square: bool,
    band: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
struct Building {
    start: f64,
    style: usize,
    base: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Glyph {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    bits: Vec<bool>,
    cols: usize,
    rows: usize,
}

/// One side of the street.
#[derive(Clone, Debug, PartialEq)]
struct Facade {
    buildings: Vec<Building>,
    styles: Vec<Vec<Stripe>>,
    glyphs: Vec<Glyph>,
    max_glyph: f64,
}

impl Facade {
    fn generate(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Self {
        let styles = (0..spec.styles)
            .map(|_| {
                (0..spec.stripes_per_style)
                    .map(|_| {
                        let y0: f64 = rng.random_range(0.0..0.7);
                        let h = rng.random_range(0.2..(1.0 - y0).max(0.21));
                        Stripe {
                            amplitude: rng.random_range(0.15..0.45),
                            frequency: rng.random_range(0.2..1.2),
                            phase: rng.random_range(0.0..1.0),
                            square: rng.random_bool(0.5),
                            band: (y0, (y0 + h).min(1.0)),
                        }
                    })
                    .collect()
            })
            .collect();
        let margin = spec.window_width;
        let mut buildings = Vec::new();
        let mut x = -margin;
        while x < spec.street_length + margin {
            buildings.push(Building {
                start: x,
                style: rng.random_range(0..spec.styles),
                base: rng.random_range(0.25..0.55),
            });
            x += rng.random_range(spec.building_min..=spec.building_max);
        }
        let mut glyphs = Vec::new();
        let mut max_glyph: f64 = 0.0;
        let span = spec.street_length + 2.0 * margin;
        let count = (span / 100.0 * spec.glyphs_per_100m).round() as usize;
        for _ in 0..count {
            let x0 = rng.random_range(-margin..spec.street_length + margin);
            let wdt = rng.random_range(1.5..4.0);
            let y0 = rng.random_range(0.05..0.6);
            let hgt = rng.random_range(0.15..0.35);
            let (cols, rows) = (rng.random_range(3..6), rng.random_range(2..4));
            let bits = (0..cols * rows).map(|_| rng.random_bool(0.5)).collect();
            max_glyph = max_glyph.max(wdt);
            glyphs.push(Glyph {
                x0,
                x1: x0 + wdt,
                y0,
                y1: (y0 + hgt).min(1.0),
                bits,
                cols,
                rows,
            });
        }
        glyphs.sort_by(|a, b| a.x0.total_cmp(&b.x0));
        Self {
            buildings,
            styles,
            glyphs,
            max_glyph,
        }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let bi = self.buildings.partition_point(|b| b.start <= x).saturating_sub(1);
        let b = &self.buildings[bi];
        let mut v = b.base;
        for s in &self.styles[b.style] {
            if y < s.band.0 || y >= s.band.1 {
                continue;
            }
            let t = (x - b.start) * s.frequency + s.phase;
            let wave = if s.square {
                if t.fract() < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                (std::f64::consts::TAU * t).sin()
            };
            v += s.amplitude * wave;
        }
        let lo = self.glyphs.partition_point(|g| g.x0 < x - self.max_glyph);
        for g in self.glyphs[lo..].iter().take_while(|g| g.x0 <= x) {
            if x < g.x1 && y >= g.y0 && y < g.y1 {
                let cx = (((x - g.x0) / (g.x1 - g.x0)) * g.cols as f64) as usize;
                let cy = (((y - g.y0) / (g.y1 - g.y0)) * g.rows as f64) as usize;
                let on = g.bits[cy.min(g.rows - 1) * g.cols + cx.min(g.cols - 1)];
                v = if on { 0.95 } else { 0.05 };
            }
        }
        v.clamp(0.0, 1.0)
    }
}

/// The procedural world: a spec plus both facades.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    facades: [Facade; 2],
}

const SUBSAMPLES: usize = 4;

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let forward = Facade::generate(&spec, &mut rng);
        let backward = Facade::generate(&spec, &mut rng);
        Ok(Self {
            spec,
            facades: [forward, backward],
        })
    }

    /// Pixels seen from `position` facing `heading`.
    pub fn render_view(&self, position: f64, heading: i8) -> Result<Image> {
        let spec = &self.spec;
        if !(0.0..=spec.street_length).contains(&position) {
            return Err(Error::Validation(format!(
                "position {position} outside street [0, {}]",
                spec.street_length
            )));
        }
        let facade = match heading {
            1 => &self.facades[0],
            -1 => &self.facades[1],
            h => return Err(Error::Validation(format!("heading must be +1 or -1, got {h}"))),
        };
        let (h, w) = (spec.image_height, spec.image_width);
        let left = position - spec.window_width / 2.0;
        let px = spec.window_width / w as f64;
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let mut acc = 0.0;
                for s in 0..SUBSAMPLES {
                    let x = left + (c as f64 + (s as f64 + 0.5) / SUBSAMPLES as f64) * px;
                    acc += facade.sample(x, y);
                }
                data.push(quantize(acc / SUBSAMPLES as f64));
            }
        }
        Image::new(h, w, data)
    }

    fn apply_condition(&self, img: &mut Image) {
        let (gain, offset) = (self.spec.query_gain, self.spec.query_offset);
        for p in &mut img.data {
            *p = quantize((gain * (*p - 0.5) + 0.5 + offset).clamp(0.0, 1.0));
        }
    }

    pub fn view_of(&self, img: &GeoImage) -> View {
        View {
            world: self.spec.fingerprint(),
            position: img.true_x,
            heading: img.heading,
            width: self.spec.window_width,
        }
    }
}

/// Pixel payloads are stored as 32-bit floats; keep in-memory values on
/// that grid so disk round trips are exact.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Geometric identity of a rendered view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub world: u64,
    pub position: f64,
    pub heading: i8,
    pub width: f64,
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Shared facade length over the window length; 0 across headings.
pub fn overlap_fraction(a: &View, b: &View) -> Result<f64> {
    if a.world != b.world {
        return Err(Error::Validation("views come from different worlds".into()));
    }
    if a.heading != b.heading {
        return Ok(0.0);
    }
    let half = a.width / 2.0;
    let ia = (a.position - half, a.position + half);
    let ib = (b.position - half, b.position + half);
    Ok((interval_overlap(ia, ib) / a.width).clamp(0.0, 1.0))
}

/// Fraction of each gallery candidate's facade interval (full image and the
/// 8 regions) that the query window also sees.
pub fn region_overlaps(query: &View, gallery: &View, regions: &RegionSet) -> Result<[f64; 9]> {
    if query.world != gallery.world {
        return Err(Error::Validation("views come from different worlds".into()));
    }
    if query.heading != gallery.heading {
        return Ok([0.0; 9]);
    }
    let w = gallery.width;
    let q = (query.position - w / 2.0, query.position + w / 2.0);
    let g0 = gallery.position - w / 2.0;
    let fr = crate::regions::horizontal_fractions(regions);
    Ok(std::array::from_fn(|i| {
        let (f0, f1) = fr[i];
        let iv = (g0 + f0 * w, g0 + f1 * w);
        let len = iv.1 - iv.0;
        if len <= 0.0 {
            0.0
        } else {
            (interval_overlap(q, iv) / len).clamp(0.0, 1.0)
        }
    }))
}

/// Ground-truth overlap fraction of every (query, positive, region) label
/// entry, paired with the entry's weight. `map_dims` is the feature-map
/// size the regions were cut from.
pub fn label_overlaps(
    dataset: &Dataset,
    records: &[SoftLabelRecord],
    map_dims: (usize, usize),
) -> Result<Vec<(f64, f64)>> {
    let world = dataset.world()?;
    let regions = decompose_dims(map_dims.0, map_dims.1)?;
    let mut out = Vec::new();
    for r in records {
        let query = dataset
            .images
            .get(r.query)
            .ok_or_else(|| Error::Validation(format!("label query {} not in dataset", r.query)))?;
        let qv = world.view_of(query);
        for e in &r.entries {
            let g = dataset
                .images
                .get(e.gallery)
                .ok_or_else(|| Error::Validation(format!("label gallery {} not in dataset", e.gallery)))?;
            let overlaps = region_overlaps(&qv, &world.view_of(g), &regions)?;
            out.push((e.weight, overlaps[e.region as usize]));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub images: Vec<GeoImage>,
}

/// Weak-label statistics measured at generation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakLabelStats {
    /// Train (query, gallery) pairs with reported distance <= 10 m.
    pub positive_pairs: usize,
    /// ... of which the views share no facade at all.
    pub zero_overlap_pairs: usize,
}

impl WeakLabelStats {
    pub fn zero_overlap_fraction(&self) -> f64 {
        if self.positive_pairs == 0 {
            0.0
        } else {
            self.zero_overlap_pairs as f64 / self.positive_pairs as f64
        }
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<Dataset> {
    let world = World::new(spec.clone())?;
    let noise = Normal::new(0.0, spec.gps_noise).map_err(|e| Error::Validation(e.to_string()))?;
    let half = spec.street_length / 2.0;
    let w2 = spec.window_width / 2.0;
    let counts = [
        (Split::TrainQuery, spec.train_queries),
        (Split::TrainGallery, spec.train_gallery),
        (Split::TestQuery, spec.test_queries),
        (Split::TestGallery, spec.test_gallery),
    ];
    let mut images = Vec::new();
    for (stream, (split, n)) in counts.into_iter().enumerate() {
        // one stream per split so resizing a split leaves the others intact
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(stream as u64);
        let (lo, hi) = if split.is_train() {
            (w2, half - w2)
        } else {
            (half + w2, spec.street_length - w2)
        };
        for _ in 0..n {
            let true_x = rng.random_range(lo..=hi);
            let heading = if rng.random_bool(spec.forward_fraction) { 1 } else { -1 };
            let reported_x = (true_x + noise.sample(&mut rng)).clamp(0.0, spec.street_length);
            let mut image = world.render_view(true_x, heading)?;
            if split.is_query() {
                world.apply_condition(&mut image);
            }
            images.push(GeoImage {
                id: images.len(),
                image,
                true_x,
                reported_x,
                heading,
                split,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        images,
    })
}

impl Dataset {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .filter(|g| g.split == split)
            .map(|g| g.id)
            .collect()
    }

    pub fn image(&self, id: usize) -> &GeoImage {
        &self.images[id]
    }

    pub fn world(&self) -> Result<World> {
        World::new(self.spec.clone())
    }

    pub fn weak_label_stats(&self) -> WeakLabelStats {
        let queries = self.ids(Split::TrainQuery);
        let gallery = self.ids(Split::TrainGallery);
        let mut stats = WeakLabelStats {
            positive_pairs: 0,
            zero_overlap_pairs: 0,
        };
        let w = self.spec.window_width;
        for &q in &queries {
            let qi = &self.images[q];
            for &g in &gallery {
                let gi = &self.images[g];
                if (qi.reported_x - gi.reported_x).abs() <= POSITIVE_RADIUS {
                    stats.positive_pairs += 1;
                    let overlap = qi.heading == gi.heading && (qi.true_x - gi.true_x).abs() < w;
                    if !overlap {
                        stats.zero_overlap_pairs += 1;
                    }
                }
            }
        }
        stats
    }

    /// Writes `manifest.csv`, `truth.csv`, `world.toml` and `images/*.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::write(
            dir.join("world.toml"),
            toml::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        let mut manifest = String::from("id,reported_x,split\n");
        let mut truth = String::from("id,true_x,heading\n");
        for g in &self.images {
            manifest.push_str(&format!("{},{:?},{}\n", g.id, g.reported_x, g.split));
            truth.push_str(&format!("{},{:?},{}\n", g.id, g.true_x, g.heading));
            write_image(&dir.join("images").join(image_file(g.id)), &g.image)?;
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
        fs::write(dir.join("truth.csv"), truth)?;
        Ok(())
    }

    /// Loads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let spec_text = fs::read_to_string(dir.join("world.toml"))?;
        let spec: WorldSpec = toml::from_str(&spec_text).map_err(|e| Error::Format(e.to_string()))?;
        let manifest = read_csv(&dir.join("manifest.csv"), &["id", "reported_x", "split"])?;
        let truth = read_csv(&dir.join("truth.csv"), &["id", "true_x", "heading"])?;
        if manifest.len() != truth.len() {
            return Err(Error::Format("manifest and truth disagree on image count".into()));
        }
        let mut images = Vec::with_capacity(manifest.len());
        for (i, (m, t)) in manifest.iter().zip(&truth).enumerate() {
            let id: usize = parse_field(&m[0])?;
            if id != i || parse_field::<usize>(&t[0])? != id {
                return Err(Error::Format(format!("row {i}: ids must be dense and aligned")));
            }
            let image = read_image(&dir.join("images").join(image_file(id)))?;
            images.push(GeoImage {
                id,
                image,
                true_x: parse_field(&t[1])?,
                reported_x: parse_field(&m[1])?,
                heading: parse_field(&t[2])?,
                split: m[2].parse()?,
            });
        }
        Ok(Self { spec, images })
    }
}

fn image_file(id: usize) -> String {
    format!("{id:05}.bin")
}

fn parse_field<T: FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse field {s:?}")))
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    if head.trim() != header.join(",") {
        return Err(Error::Format(format!("{}: unexpected header {head:?}", path.display())));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!("{}: bad row {line:?}", path.display())));
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// `u32 H, u32 W` then `H*W` little-endian `f32` pixels.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * img.data.len());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    for p in &img.data {
        buf.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let h = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    if buf.len() != 8 + 4 * h * w {
        return Err(Error::Format(format!("{}: payload size mismatch", path.display())));
    }
    let data = buf[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::new(h, w, data)
}
