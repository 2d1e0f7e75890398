//! k-means patch codebook: maps images to grids of discrete tokens and back.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Image, Mask};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 128;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_KNOWN_FRACTION: f64 = 0.5;
const MAX_ITERS: usize = 100;
const CONVERGENCE_SHIFT: f64 = 1e-6;

const PSCB_MAGIC: &[u8; 4] = b"PSCB";
const PSCB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    patch: usize,
    vectors: Vec<f32>,
}

/// Token grid; `known = false` marks cells still to be generated, whose
/// token value is a placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub tokens: Grid<u16>,
    pub known: Mask,
}

impl TokenGrid {
    pub fn complete(tokens: Grid<u16>) -> Self {
        let known = tokens.map(|_| true);
        Self { tokens, known }
    }

    pub fn height(&self) -> usize {
        self.tokens.height()
    }

    pub fn width(&self) -> usize {
        self.tokens.width()
    }

    pub fn unknown_count(&self) -> usize {
        self.known.len() - self.known.count()
    }

    pub fn is_complete(&self) -> bool {
        self.unknown_count() == 0
    }

    pub fn first_unknown(&self) -> Option<(usize, usize)> {
        self.known
            .iter_indexed()
            .find(|&(_, _, &k)| !k)
            .map(|(r, c, _)| (r, c))
    }
}

fn extract_patch(image: &Image, patch: usize, prow: usize, pcol: usize, out: &mut Vec<f32>) {
    out.clear();
    for dy in 0..patch {
        for dx in 0..patch {
            out.extend_from_slice(image.get(prow * patch + dy, pcol * patch + dx));
        }
    }
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y as f64;
            d * d
        })
        .sum()
}

fn check_divisible(image: &Image, patch: usize) -> Result<()> {
    if patch == 0 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

impl Codebook {
    pub fn new(k: usize, patch: usize, vectors: Vec<f32>) -> Result<Self> {
        if k == 0 || patch == 0 || vectors.len() != k * patch * patch * 3 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs {k} vectors of {} values",
                patch * patch * 3
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite codebook entry".into()));
        }
        Ok(Self { k, patch, vectors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors[index * d..(index + 1) * d]
    }

    /// Nearest entry to `values` over the coordinates where `weight` is set;
    /// ties go to the lowest index.
    fn nearest_masked(&self, values: &[f32], weight: &[bool]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let v = self.vector(j);
            let mut d = 0.0f64;
            for i in 0..values.len() {
                if weight[i] {
                    let e = values[i] as f64 - v[i] as f64;
                    d += e * e;
                }
            }
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PSCB_MAGIC)?;
        w.write_all(&PSCB_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.patch as u32).to_le_bytes())?;
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[0..4] != PSCB_MAGIC {
            return Err(Error::Format("not a PSCB codebook".into()));
        }
        let word = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        if word(4) != PSCB_VERSION {
            return Err(Error::Format(format!("unsupported PSCB version {}", word(4))));
        }
        let (k, patch) = (word(8) as usize, word(12) as usize);
        let mut bytes = vec![0u8; k * patch * patch * 3 * 4];
        r.read_exact(&mut bytes)?;
        let vectors = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, patch, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// k-means over all `patch x patch` tiles of `images` with k-means++
/// initialization. Empty clusters are re-seeded from the patch farthest from
/// its assigned centroid.
pub fn fit_codebook(images: &[Image], k: usize, patch: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_traced(images, k, patch, seed, |_| {})
}

/// [`fit_codebook`] reporting the k-means objective after every assignment step.
pub fn fit_codebook_traced(
    images: &[Image],
    k: usize,
    patch: usize,
    seed: u64,
    mut on_objective: impl FnMut(f64),
) -> Result<Codebook> {
    if images.is_empty() {
        return Err(Error::Empty("no images to fit a codebook".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let dim = patch * patch * 3;
    let mut data: Vec<f64> = Vec::new();
    let mut buf = Vec::new();
    for img in images {
        check_divisible(img, patch)?;
        for pr in 0..img.height() / patch {
            for pc in 0..img.width() / patch {
                extract_patch(img, patch, pr, pc, &mut buf);
                data.extend(buf.iter().map(|&v| v as f64));
            }
        }
    }
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.gen_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| dist(point(i), &centroids[0..dim])).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        for i in 0..n {
            let d = dist(point(i), &centroids[start..start + dim]);
            if d < closest[i] {
                closest[i] = d;
            }
        }
    }

    let mut assign = vec![0usize; n];
    let mut assigned_dist = vec![0.0f64; n];
    for _ in 0..MAX_ITERS {
        let mut objective = 0.0;
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let d = dist(point(i), &centroids[j * dim..(j + 1) * dim]);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
            assigned_dist[i] = best.1;
            objective += best.1;
        }
        on_objective(objective);

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0f64;
        for j in 0..k {
            let new: Vec<f64> = if counts[j] > 0 {
                sums[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assigned_dist[a].total_cmp(&assigned_dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                point(far).to_vec()
            };
            shift = shift.max(dist(&new, &centroids[j * dim..(j + 1) * dim]).sqrt());
            centroids[j * dim..(j + 1) * dim].copy_from_slice(&new);
        }
        if shift < CONVERGENCE_SHIFT {
            break;
        }
    }
    Codebook::new(k, patch, centroids.iter().map(|&v| v as f32).collect())
}

/// Token-level visibility: a token is known when at least `known_fraction`
/// of its `patch` x `patch` pixels (and at least one) are visible.
pub fn known_tokens(visible: &Mask, patch: usize, known_fraction: f64) -> Result<Mask> {
    if patch == 0 || visible.height() % patch != 0 || visible.width() % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} mask is not divisible into {patch}x{patch} patches",
            visible.height(),
            visible.width()
        )));
    }
    Ok(Grid::from_fn(visible.height() / patch, visible.width() / patch, |pr, pc| {
        let seen = (0..patch * patch)
            .filter(|i| *visible.get(pr * patch + i / patch, pc * patch + i % patch))
            .count();
        seen as f64 >= known_fraction * (patch * patch) as f64 && seen > 0
    }))
}

/// Quantizes every patch to its nearest entry using only visible pixels. A
/// token is known when at least `known_fraction` of its patch is visible.
pub fn encode(image: &Image, visible: &Mask, codebook: &Codebook, known_fraction: f64) -> Result<TokenGrid> {
    let p = codebook.patch;
    check_divisible(image, p)?;
    if !image.same_shape(visible) {
        return Err(Error::Shape("image and visibility mask differ".into()));
    }
    let (gh, gw) = (image.height() / p, image.width() / p);
    let mut tokens = Grid::filled(gh, gw, 0u16);
    let known = known_tokens(visible, p, known_fraction)?;
    let mut values = Vec::with_capacity(codebook.dim());
    let mut weight = Vec::with_capacity(codebook.dim());
    for pr in 0..gh {
        for pc in 0..gw {
            extract_patch(image, p, pr, pc, &mut values);
            weight.clear();
            for dy in 0..p {
                for dx in 0..p {
                    let v = *visible.get(pr * p + dy, pc * p + dx);
                    weight.extend_from_slice(&[v; 3]);
                }
            }
            let (token, _) = codebook.nearest_masked(&values, &weight);
            tokens.set(pr, pc, token as u16);
        }
    }
    Ok(TokenGrid { tokens, known })
}

/// Pastes each token's patch. Every token must be known.
pub fn decode(grid: &TokenGrid, codebook: &Codebook) -> Result<Image> {
    if let Some((row, col)) = grid.first_unknown() {
        return Err(Error::UnknownToken { row, col });
    }
    let p = codebook.patch;
    for &t in grid.tokens.as_slice() {
        if t as usize >= codebook.k {
            return Err(Error::InvalidArgument(format!("token {t} out of range")));
        }
    }
    Ok(Grid::from_fn(grid.height() * p, grid.width() * p, |row, col| {
        let v = codebook.vector(*grid.tokens.get(row / p, col / p) as usize);
        let o = ((row % p) * p + col % p) * 3;
        [v[o], v[o + 1], v[o + 2]]
    }))
}

/// Squared distance of a patch of `image` to codebook entry `token`.
pub fn patch_error(image: &Image, codebook: &Codebook, prow: usize, pcol: usize, token: usize) -> f64 {
    let mut values = Vec::new();
    extract_patch(image, codebook.patch, prow, pcol, &mut values);
    let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    sq_dist(&v, codebook.vector(token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const RED: [f32; 3] = [1.0, 0.0, 0.0];
    const BLUE: [f32; 3] = [0.0, 0.0, 1.0];

    fn two_color_image(seed: u64) -> Image {
        // 4x4 patches, each solid red or solid blue.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let choice: Vec<bool> = (0..16).map(|_| rng.gen()).collect();
        Grid::from_fn(16, 16, |r, c| if choice[(r / 4) * 4 + c / 4] { RED } else { BLUE })
    }

    fn solid_codebook(colors: &[[f32; 3]]) -> Codebook {
        let v = colors.iter().flat_map(|c| c.repeat(16)).collect();
        Codebook::new(colors.len(), 4, v).unwrap()
    }

    #[test]
    fn two_colors_recovered_exactly() {
        let images: Vec<Image> = (0..3).map(two_color_image).collect();
        let cb = fit_codebook(&images, 2, 4, 7).unwrap();
        let mut found: Vec<[f32; 3]> = (0..2).map(|j| [cb.vector(j)[0], cb.vector(j)[1], cb.vector(j)[2]]).collect();
        found.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (f, e) in found.iter().zip([BLUE, RED]) {
            for c in 0..3 {
                assert!((f[c] - e[c]).abs() < 1e-6);
            }
        }
        for img in &images {
            let g = encode(img, &img.map(|_| true), &cb, 0.5).unwrap();
            assert_eq!(&decode(&g, &cb).unwrap(), img);
        }
    }

    #[test]
    fn single_entry_is_the_mean_patch() {
        let images: Vec<Image> = (0..2).map(two_color_image).collect();
        let cb = fit_codebook(&images, 1, 4, 1).unwrap();
        let reds = images
            .iter()
            .flat_map(|i| i.as_slice().iter())
            .filter(|p| **p == RED)
            .count() as f32;
        let mean_red = reds / (2.0 * 256.0);
        assert!((cb.vector(0)[0] - mean_red).abs() < 1e-6);
        let g = encode(&images[0], &images[0].map(|_| true), &cb, 0.5).unwrap();
        assert!(g.tokens.as_slice().iter().all(|&t| t == 0));
        let dec = decode(&g, &cb).unwrap();
        assert!(dec.as_slice().iter().all(|p| *p == *dec.get(0, 0)));
    }

    #[test]
    fn fitting_is_deterministic() {
        let images: Vec<Image> = (0..4).map(two_color_image).collect();
        assert_eq!(
            fit_codebook(&images, 3, 4, 5).unwrap(),
            fit_codebook(&images, 3, 4, 5).unwrap()
        );
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_codebook(&[], 2, 4, 0), Err(Error::Empty(_))));
        let odd = Grid::filled(6, 8, RED);
        assert!(fit_codebook(&[odd], 2, 4, 0).is_err());
    }

    #[test]
    fn tiled_entry_encodes_to_itself() {
        let cb = solid_codebook(&[RED, BLUE]);
        let img = Grid::filled(8, 8, BLUE);
        let g = encode(&img, &img.map(|_| true), &cb, 0.5).unwrap();
        assert!(g.tokens.as_slice().iter().all(|&t| t == 1));
        assert!(g.is_complete());
        assert_eq!(decode(&g, &cb).unwrap(), img);
    }

    #[test]
    fn nothing_visible_means_nothing_known() {
        let cb = solid_codebook(&[RED, BLUE]);
        let img = Grid::filled(8, 8, BLUE);
        let g = encode(&img, &img.map(|_| false), &cb, 0.5).unwrap();
        assert_eq!(g.unknown_count(), 4);
        assert!(matches!(decode(&g, &cb), Err(Error::UnknownToken { row: 0, col: 0 })));
    }

    #[test]
    fn half_visible_red_patch() {
        let cb = solid_codebook(&[RED, BLUE]);
        // Left half red and visible; right half blue but hidden.
        let img = Grid::from_fn(4, 4, |_, c| if c < 2 { RED } else { BLUE });
        let vis = Grid::from_fn(4, 4, |_, c| c < 2);
        let g = encode(&img, &vis, &cb, 0.25).unwrap();
        assert_eq!(*g.tokens.get(0, 0), 0);
        assert!(*g.known.get(0, 0));
    }

    #[test]
    fn pscb_round_trip() {
        let cb = solid_codebook(&[RED, BLUE, [0.25, 0.5, 0.75]]);
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PSCB");
        assert_eq!(buf.len(), 16 + 3 * 48 * 4);
        assert_eq!(Codebook::read_from(&buf[..]).unwrap(), cb);
    }

    fn noise_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn quantization_is_a_projection(seed in 0u64..1000) {
            let corpus: Vec<Image> = (0..3).map(|s| noise_image(seed * 10 + s)).collect();
            let cb = fit_codebook(&corpus, 5, 4, seed).unwrap();
            let img = noise_image(seed + 5000);
            let all = img.map(|_| true);
            let g = encode(&img, &all, &cb, 0.5).unwrap();
            for pr in 0..2 {
                for pc in 0..2 {
                    let chosen = patch_error(&img, &cb, pr, pc, *g.tokens.get(pr, pc) as usize);
                    for j in 0..cb.k() {
                        prop_assert!(chosen <= patch_error(&img, &cb, pr, pc, j));
                    }
                }
            }
            let dec = decode(&g, &cb).unwrap();
            let again = encode(&dec, &all, &cb, 0.5).unwrap();
            prop_assert_eq!(&again, &g);
            prop_assert_eq!(decode(&again, &cb).unwrap(), dec);
        }

        #[test]
        fn hidden_pixels_do_not_matter(seed in 0u64..1000) {
            let corpus: Vec<Image> = (0..2).map(|s| noise_image(seed * 7 + s)).collect();
            let cb = fit_codebook(&corpus, 4, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vis: Mask = Grid::from_fn(8, 8, |_, _| rng.gen_bool(0.6));
            let a = noise_image(seed + 1);
            let mut b = noise_image(seed + 2);
            for (r, c, &v) in vis.iter_indexed() {
                if v {
                    b.set(r, c, *a.get(r, c));
                }
            }
            prop_assert_eq!(encode(&a, &vis, &cb, 0.5).unwrap(), encode(&b, &vis, &cb, 0.5).unwrap());
        }

        #[test]
        fn kmeans_objective_never_increases(seed in 0u64..1000) {
            let corpus: Vec<Image> = (0..3).map(|s| noise_image(seed * 3 + s)).collect();
            let mut trace = Vec::new();
            fit_codebook_traced(&corpus, 4, 2, seed, |o| trace.push(o)).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", trace);
            }
        }

        #[test]
        fn token_grids_survive_decode_encode(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let colors: Vec<[f32; 3]> = (0..6).map(|i| [i as f32 / 5.0, rng.gen(), rng.gen()]).collect();
            let cb = solid_codebook(&colors);
            let tokens = Grid::from_fn(3, 5, |_, _| rng.gen_range(0..6u16));
            let g = TokenGrid::complete(tokens);
            let img = decode(&g, &cb).unwrap();
            prop_assert_eq!(encode(&img, &img.map(|_| true), &cb, 0.5).unwrap(), g);
        }
    }
}
