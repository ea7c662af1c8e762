//! Procedural attribute-driven face corpus in the CelebA aligned layout
//! (178x218 PNGs plus a 40-column `list_attr_celeba.txt`). Every schema
//! attribute changes the rendering, so conditioning and classification can
//! be exercised without the real dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::{attribute_index, AttributeVector, N_ATTRIBUTES};
use crate::error::Result;
use crate::image::Image;

pub const RAW_WIDTH: usize = 178;
pub const RAW_HEIGHT: usize = 218;

/// The 40 CelebA attribute columns in file order.
pub const CELEBA_HEADER: [&str; 40] = [
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald", "Bangs",
    "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair", "Blurry", "Brown_Hair", "Bushy_Eyebrows",
    "Chubby", "Double_Chin", "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup",
    "High_Cheekbones", "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks", "Sideburns",
    "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings", "Wearing_Hat",
    "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie", "Young",
];

const BALD: usize = 0;
const BANGS: usize = 1;
const BLACK: usize = 2;
const BLOND: usize = 3;
const BROWN: usize = 4;
const BUSHY: usize = 5;
const GLASSES: usize = 6;
const MALE: usize = 7;
const MOUTH: usize = 8;
const MUSTACHE: usize = 9;
const PALE: usize = 10;
const YOUNG: usize = 11;

type Rgb = [f64; 3];

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Approximate signed distance to an axis-aligned ellipse, in face units.
fn ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    let q = (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt();
    (q - 1.0) * ru.min(rv)
}

fn rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> f64 {
    let du = (u0 - u).max(u - u1);
    let dv = (v0 - v).max(v - v1);
    du.max(dv)
}

/// Per-face geometric and colour jitter, drawn once per rendering.
struct Jitter {
    background: Rgb,
    skin: f64,
    offset: (f64, f64),
    scale: f64,
    noise: f64,
}

/// Renders one raw 178x218 face for the given (binarized) attributes.
pub fn render_face<R: Rng + ?Sized>(attrs: &AttributeVector, rng: &mut R) -> Image {
    let a = |i: usize| attrs.get(i) >= 0.5;
    let j = Jitter {
        background: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        skin: rng.random_range(-0.05..0.05),
        offset: (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)),
        scale: rng.random_range(0.95..1.05),
        noise: 0.015,
    };
    let hair: Rgb = if a(BLOND) {
        [0.93, 0.80, 0.45]
    } else if a(BLACK) {
        [0.07, 0.06, 0.06]
    } else if a(BROWN) {
        [0.42, 0.26, 0.13]
    } else {
        [0.62, 0.58, 0.55]
    };
    let hair = if a(YOUNG) { hair } else { mix(hair, [0.75, 0.75, 0.75], 0.45) };
    let skin_base: Rgb = if a(PALE) { [0.98, 0.88, 0.82] } else { [0.80, 0.58, 0.44] };
    let skin = skin_base.map(|c| (c + j.skin).clamp(0.0, 1.0));
    let dark: Rgb = [0.08, 0.06, 0.06];
    let face_rx = if a(MALE) { 0.60 } else { 0.52 };

    let mut px = Array3::zeros((RAW_HEIGHT, RAW_WIDTH, 3));
    let unit = 60.0 * j.scale;
    for y in 0..RAW_HEIGHT {
        for x in 0..RAW_WIDTH {
            let u = (x as f64 + 0.5 - RAW_WIDTH as f64 / 2.0) / unit - j.offset.0;
            let v = (y as f64 + 0.5 - RAW_HEIGHT as f64 / 2.0) / unit - j.offset.1;
            // Coverage of a shape whose signed distance is `d`, antialiased over one pixel.
            let cover = |d: f64| (0.5 - d * unit).clamp(0.0, 1.0);
            let mut c = mix(j.background, [0.5, 0.5, 0.5], 0.2 * (v + 1.0).clamp(0.0, 2.0) / 2.0);

            if !a(BALD) {
                let mut d = ellipse(u, v, 0.0, -0.12, face_rx + 0.16, 0.86);
                if !a(MALE) {
                    d = d.min(rect(u, v, -face_rx - 0.18, face_rx + 0.18, -0.1, 0.95));
                }
                c = mix(c, hair, cover(d));
            }
            c = mix(c, [0.2, 0.2, 0.25], cover(rect(u, v, -0.45, 0.45, 0.85, 1.4)));
            c = mix(c, skin, cover(rect(u, v, -0.16, 0.16, 0.6, 0.95)));
            let head = if a(BALD) {
                ellipse(u, v, 0.0, 0.0, face_rx + 0.04, 0.86)
            } else {
                ellipse(u, v, 0.0, 0.08, face_rx, 0.72)
            };
            c = mix(c, skin, cover(head));
            if a(MALE) {
                c = mix(c, mix(skin, [0.5, 0.4, 0.35], 0.15), cover(rect(u, v, -0.4, 0.4, 0.45, 0.72).max(head)));
            }
            if !a(YOUNG) {
                for k in 0..3 {
                    let line = rect(u, v, -0.25, 0.25, -0.5 + 0.07 * k as f64, -0.49 + 0.07 * k as f64);
                    c = mix(c, mix(skin, dark, 0.4), cover(line));
                }
            }
            if a(BANGS) && !a(BALD) {
                c = mix(c, hair, cover(ellipse(u, v, 0.0, -0.55, face_rx + 0.02, 0.3)));
            }
            let (brow_w, brow_h) = if a(BUSHY) { (0.17, 0.11) } else { (0.12, 0.022) };
            for s in [-1.0, 1.0] {
                let brow = rect(u, v, s * 0.22 - brow_w, s * 0.22 + brow_w, -0.22 - brow_h / 2.0, -0.22 + brow_h / 2.0);
                c = mix(c, mix(hair, dark, 0.7), cover(brow));
                c = mix(c, [0.96, 0.96, 0.96], cover(ellipse(u, v, s * 0.22, -0.05, 0.09, 0.05)));
                c = mix(c, dark, cover(ellipse(u, v, s * 0.22, -0.05, 0.04, 0.04)));
                if a(GLASSES) {
                    let ring = ellipse(u, v, s * 0.22, -0.05, 0.15, 0.12).abs() - 0.018;
                    c = mix(c, [0.02, 0.02, 0.05], cover(ring));
                }
            }
            if a(GLASSES) {
                c = mix(c, [0.02, 0.02, 0.05], cover(rect(u, v, -0.07, 0.07, -0.07, -0.04)));
            }
            c = mix(c, mix(skin, dark, 0.25), cover(rect(u, v, -0.03, 0.03, -0.02, 0.2)));
            if a(MUSTACHE) {
                c = mix(c, mix(hair, dark, 0.8), cover(ellipse(u, v, 0.0, 0.3, 0.26, 0.07)));
            }
            if a(MOUTH) {
                c = mix(c, [0.75, 0.3, 0.3], cover(ellipse(u, v, 0.0, 0.45, 0.19, 0.12)));
                c = mix(c, [0.12, 0.02, 0.03], cover(ellipse(u, v, 0.0, 0.45, 0.15, 0.085)));
            } else {
                c = mix(c, [0.72, 0.32, 0.32], cover(ellipse(u, v, 0.0, 0.43, 0.15, 0.025)));
            }
            for (ch, value) in c.iter().enumerate() {
                px[[y, x, ch]] = value + rng.random_range(-j.noise..j.noise);
            }
        }
    }
    Image::from_clamped(px)
}

/// Draws attributes with at most one hair colour and no bangs on bald faces.
pub fn random_face_attributes<R: Rng + ?Sized>(rng: &mut R) -> AttributeVector {
    let mut v = AttributeVector::random(rng, false).values().to_owned();
    let colour = rng.random_range(0..4);
    for (k, idx) in [BLACK, BLOND, BROWN].into_iter().enumerate() {
        v[idx] = if colour == k { 1.0 } else { 0.0 };
    }
    if v[BALD] == 1.0 {
        v[BANGS] = 0.0;
    }
    AttributeVector::new(v).expect("binary values are valid")
}

/// Writes `count` faces and a matching `list_attr_celeba.txt` under `dir`.
/// Returns the path of the attribute file; images live in `dir/img`.
pub fn write_corpus(dir: &Path, count: usize, seed: u64) -> Result<std::path::PathBuf> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let column_of: Vec<Option<usize>> = CELEBA_HEADER.iter().map(|n| attribute_index(n)).collect();
    let mut text = format!("{count}\n{}\n", CELEBA_HEADER.join(" "));
    for i in 0..count {
        let attrs = random_face_attributes(&mut rng);
        let name = format!("{:06}.png", i + 1);
        render_face(&attrs, &mut rng).save_png(&img_dir.join(&name))?;
        text.push_str(&name);
        for col in &column_of {
            let label = match col {
                Some(k) if attrs.get(*k) == 1.0 => 1,
                Some(_) => -1,
                None => if rng.random_bool(0.5) { 1 } else { -1 },
            };
            write!(text, " {label:>2}").expect("writing to a String");
        }
        text.push('\n');
    }
    let path = dir.join("list_attr_celeba.txt");
    fs::write(&path, text)?;
    Ok(path)
}

/// 16x16 textured images labelled by mean brightness on attribute `k`
/// (1 when the mean exceeds 0.5). Other attributes carry coin flips.
pub fn brightness_samples(count: usize, k: usize, seed: u64) -> Vec<(Image, AttributeVector)> {
    assert!(k < N_ATTRIBUTES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let level: f64 = rng.random_range(0.15..0.85);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
            let px = Array3::from_shape_fn((16, 16, 3), |(_, _, c)| level + tint[c] + rng.random_range(-0.1..0.1));
            let img = Image::from_clamped(px);
            let mut labels = AttributeVector::random(&mut rng, false).values().to_owned();
            labels[k] = if img.mean() > 0.5 { 1.0 } else { 0.0 };
            (img, AttributeVector::new(labels).expect("binary labels"))
        })
        .collect()
}
