//! Collocation points `(x_hat, y)` drawn over the training box.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::systems::{BoxDomain, SystemModel};

/// A fixed set of collocation pairs. `x_hat` and `y` are stored flat,
/// point-major (`x_hat[j * n..(j + 1) * n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    n: usize,
    p: usize,
    x_hat: Vec<f64>,
    y: Vec<f64>,
    seed: u64,
    domain_x: BoxDomain,
    domain_y: BoxDomain,
}

impl CollocationSet {
    /// Builds a set from explicit points. Every point must lie in the boxes.
    pub fn from_points(
        domain_x: BoxDomain,
        domain_y: BoxDomain,
        points: &[(Vec<f64>, Vec<f64>)],
        seed: u64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Precondition("collocation set must be nonempty".into()));
        }
        let (n, p) = (domain_x.dim(), domain_y.dim());
        let mut x_hat = Vec::with_capacity(points.len() * n);
        let mut y = Vec::with_capacity(points.len() * p);
        for (j, (xh, yy)) in points.iter().enumerate() {
            if xh.len() != n {
                return Err(Error::shape("collocation x_hat", n, xh.len()));
            }
            if yy.len() != p {
                return Err(Error::shape("collocation y", p, yy.len()));
            }
            if !domain_x.contains(xh) || !domain_y.contains(yy) {
                return Err(Error::Precondition(format!(
                    "collocation point {j} lies outside the domain"
                )));
            }
            x_hat.extend_from_slice(xh);
            y.extend_from_slice(yy);
        }
        Ok(CollocationSet {
            n,
            p,
            x_hat,
            y,
            seed,
            domain_x,
            domain_y,
        })
    }

    pub fn len(&self) -> usize {
        self.x_hat.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.x_hat.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn domain_x(&self) -> &BoxDomain {
        &self.domain_x
    }

    pub fn domain_y(&self) -> &BoxDomain {
        &self.domain_y
    }

    pub fn x_hat(&self, j: usize) -> &[f64] {
        &self.x_hat[j * self.n..(j + 1) * self.n]
    }

    pub fn y(&self, j: usize) -> &[f64] {
        &self.y[j * self.p..(j + 1) * self.p]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        self.x_hat.chunks(self.n).zip(self.y.chunks(self.p))
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> CollocationSet {
        let mut x_hat = Vec::with_capacity(indices.len() * self.n);
        let mut y = Vec::with_capacity(indices.len() * self.p);
        for &j in indices {
            x_hat.extend_from_slice(self.x_hat(j));
            y.extend_from_slice(self.y(j));
        }
        CollocationSet {
            x_hat,
            y,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> CollocationSet {
        CollocationSet {
            n: self.n,
            p: self.p,
            x_hat: Vec::new(),
            y: Vec::new(),
            seed: self.seed,
            domain_x: self.domain_x.clone(),
            domain_y: self.domain_y.clone(),
        }
    }

    /// Writes `x_hat_1..x_hat_n, y_1..y_p` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# collocation seed={} points={}", self.seed, self.len())?;
        let header: Vec<String> = (1..=self.n)
            .map(|i| format!("xhat{i}"))
            .chain((1..=self.p).map(|i| format!("y{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (xh, y) in self.iter() {
            let row: Vec<String> = xh.iter().chain(y).map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Draws `n_points` i.i.d. uniform pairs over `domain_x x domain_y`, with
/// `y` independent of `x_hat`.
pub fn sample_collocation(system: &SystemModel, n_points: usize, seed: u64) -> Result<CollocationSet> {
    sample_boxes(system.domain_x(), system.domain_y(), n_points, seed)
}

pub fn sample_boxes(
    domain_x: &BoxDomain,
    domain_y: &BoxDomain,
    n_points: usize,
    seed: u64,
) -> Result<CollocationSet> {
    if n_points == 0 {
        return Err(Error::Config("n_points must be at least 1".into()));
    }
    domain_x.check()?;
    domain_y.check()?;
    let (n, p) = (domain_x.dim(), domain_y.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_hat = vec![0.0; n_points * n];
    let mut y = vec![0.0; n_points * p];
    for j in 0..n_points {
        let xs = &mut x_hat[j * n..(j + 1) * n];
        domain_x.sample(&mut rng, xs);
        assert!(domain_x.contains(xs), "sampled x_hat escaped the box");
        let ys = &mut y[j * p..(j + 1) * p];
        domain_y.sample(&mut rng, ys);
        assert!(domain_y.contains(ys), "sampled y escaped the box");
    }
    Ok(CollocationSet {
        n,
        p,
        x_hat,
        y,
        seed,
        domain_x: domain_x.clone(),
        domain_y: domain_y.clone(),
    })
}

/// Shuffled partition into batches of `batch_size` (the last one may be
/// short). `batch_size == len` returns the set itself as a single batch.
pub fn batches(set: &CollocationSet, batch_size: usize, seed: u64) -> Result<Vec<CollocationSet>> {
    let total = set.len();
    if batch_size == 0 || batch_size > total {
        return Err(Error::Config(format!(
            "batch_size must lie in 1..={total}, got {batch_size}"
        )));
    }
    if batch_size == total {
        return Ok(vec![set.clone()]);
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|idx| set.select(idx)).collect())
}
