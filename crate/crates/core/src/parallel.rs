//! Data-parallel execution: shard the training set across N in-process
//! workers, evaluate per-shard sums concurrently, and combine them with a
//! fixed-tree reduction over a canonical chunk grid, so results do not
//! depend on scheduling — or, for aligned power-of-two worker counts, on
//! the worker count at all. Also the analytic communication-cost models
//! for both parallelism strategies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_from_rows, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{
    deterministic_reduce, deterministic_sum, reduction_chunk_count, Vector,
};
use crate::model::{self, Batch, NetworkSpec, ParameterVector, Targets};

/// A dataset split into N disjoint shards. Membership is decided by a
/// seeded permutation cut into contiguous chunks, and rows stay in
/// permuted order inside each shard, so all worker counts walk the same
/// canonical sample sequence and a single shard is exactly the permuted
/// dataset.
#[derive(Debug, Clone)]
pub struct ShardedDataset {
    shards: Vec<Batch>,
    /// Original dataset indices per shard, in shard (permuted) order.
    shard_rows: Vec<Vec<usize>>,
    /// The seeded permutation: global position → original index. Depends
    /// only on (seed, n), never on N, so mini-batch draws over positions
    /// pick the same samples for every worker count.
    perm: Vec<usize>,
    /// Start positions per shard in permutation space (length N+1, last
    /// entry = n).
    offsets: Vec<usize>,
    n: usize,
    num_classes: usize,
}

impl ShardedDataset {
    pub fn num_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shard(&self, i: usize) -> &Batch {
        &self.shards[i]
    }

    /// Original dataset indices held by shard i, in shard order.
    pub fn rows(&self, i: usize) -> &[usize] {
        &self.shard_rows[i]
    }

    /// The full seeded permutation (position → original index); shard i
    /// holds the slice `permutation()[offsets[i]..offsets[i+1]]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

/// Permutes sample indices by seed, splits them into N contiguous chunks
/// (sizes ⌈n/N⌉ then ⌊n/N⌋), and materialises one batch per shard.
pub fn shard_dataset(ds: &Dataset, n_workers: usize, seed: u64) -> Result<ShardedDataset> {
    let n = ds.n();
    if n_workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    if n_workers > n {
        return Err(Error::InvalidConfig(format!(
            "cannot shard {n} samples across {n_workers} workers"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }

    let base = n / n_workers;
    let rem = n % n_workers;
    let mut shards = Vec::with_capacity(n_workers);
    let mut shard_rows = Vec::with_capacity(n_workers);
    let mut offsets = Vec::with_capacity(n_workers + 1);
    let mut start = 0;
    for i in 0..n_workers {
        let size = base + usize::from(i < rem);
        offsets.push(start);
        let rows: Vec<usize> = perm[start..start + size].to_vec();
        shards.push(batch_from_rows(ds, &rows)?);
        shard_rows.push(rows);
        start += size;
    }
    offsets.push(n);
    Ok(ShardedDataset {
        shards,
        shard_rows,
        perm,
        offsets,
        n,
        num_classes: ds.num_classes,
    })
}

/// One iteration's mini-batch, pre-routed to workers: shard i evaluates
/// the local row indices in `per_shard[i]` against its own batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    per_shard: Vec<Vec<usize>>,
    b: usize,
}

impl BatchAssignment {
    pub fn b(&self) -> usize {
        self.b
    }

    pub fn shard_rows(&self, i: usize) -> &[usize] {
        &self.per_shard[i]
    }

    /// Recovers the mini-batch as original dataset indices, concatenated
    /// in shard order (the order the distributed sums visit them).
    pub fn original_rows(&self, data: &ShardedDataset) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.b);
        for (i, locals) in self.per_shard.iter().enumerate() {
            out.extend(locals.iter().map(|&r| data.rows(i)[r]));
        }
        out
    }
}

fn annotate(shard: usize, e: Error) -> Error {
    Error::Worker {
        shard,
        source: Box::new(e),
    }
}

/// One worker's partial sum over (a slice of) canonical chunk `chunk`.
/// Workers whose range cuts through a chunk produce fragments; the
/// orchestrator glues fragments back together in position order before
/// the tree reduce, so every worker count reduces the same chunk list.
struct ChunkPartial<T> {
    chunk: usize,
    value: T,
}

/// Splits the absolute position range [lo, hi) at multiples of
/// `chunk_size`, yielding `(chunk_index, start, end)` pieces in order.
fn chunk_pieces(lo: usize, hi: usize, chunk_size: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = lo;
    while start < hi {
        let chunk = start / chunk_size;
        let end = hi.min((chunk + 1) * chunk_size);
        out.push((chunk, start, end));
        start = end;
    }
    out
}

/// Glues per-worker chunk partials (already in position order) into one
/// value per chunk. Fragments of a chunk merge sequentially, matching the
/// order a worker owning the whole chunk would have used.
fn merge_chunk_partials<T>(
    per_worker: Vec<Vec<ChunkPartial<T>>>,
    mut merge: impl FnMut(T, T) -> T,
) -> Vec<T> {
    let mut ids: Vec<usize> = Vec::new();
    let mut values: Vec<T> = Vec::new();
    for partial in per_worker.into_iter().flatten() {
        if ids.last() == Some(&partial.chunk) {
            let glued = merge(values.pop().expect("value per id"), partial.value);
            values.push(glued);
        } else {
            ids.push(partial.chunk);
            values.push(partial.value);
        }
    }
    values
}

fn add_vectors(mut a: Vector, b: Vector) -> Vector {
    for i in 0..a.len() {
        a[i] += b[i];
    }
    a
}

/// Orchestrates N worker evaluations over one shared parameter vector.
/// Workers run concurrently on disjoint shards and return per-chunk
/// partial sums over the canonical reduction grid; the orchestrator glues
/// and tree-reduces them. Outputs are bit-reproducible regardless of
/// scheduling, and bit-identical across worker counts whenever shard
/// boundaries land on the chunk grid (any power-of-two N dividing the
/// grid size).
pub struct ParallelExecutor {
    spec: NetworkSpec,
    data: ShardedDataset,
}

impl ParallelExecutor {
    pub fn new(spec: NetworkSpec, data: ShardedDataset) -> Result<Self> {
        let d0 = data.shard(0).inputs.cols();
        if d0 != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "ParallelExecutor::new",
                expected: spec.input_dim(),
                actual: d0,
            });
        }
        Ok(ParallelExecutor { spec, data })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn data(&self) -> &ShardedDataset {
        &self.data
    }

    pub fn num_workers(&self) -> usize {
        self.data.num_workers()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    /// Runs `f(shard_index, shard)` on every shard — inline for N=1,
    /// on scoped threads otherwise — and collects the results in shard
    /// order. Worker errors come back annotated with the shard index.
    fn map_shards<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &Batch) -> Result<T> + Sync,
    {
        let n = self.data.num_workers();
        if n == 1 {
            return f(0, self.data.shard(0))
                .map(|v| vec![v])
                .map_err(|e| annotate(0, e));
        }
        std::thread::scope(|scope| {
            let f = &f;
            let handles: Vec<_> = (0..n)
                .map(|i| {
                    let shard = self.data.shard(i);
                    scope.spawn(move || f(i, shard))
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(i, h)| {
                    h.join()
                        .unwrap_or_else(|_| panic!("worker {i} panicked"))
                        .map_err(|e| annotate(i, e))
                })
                .collect()
        })
    }

    /// Per-worker chunk partials for a sum over the whole training set:
    /// each worker splits its position range at the canonical chunk
    /// boundaries and returns one partial per piece.
    fn full_sum_partials<T, F>(&self, per_rows_sum: F) -> Result<Vec<Vec<ChunkPartial<T>>>>
    where
        T: Send,
        F: Fn(&Batch, &[usize]) -> Result<T> + Sync,
    {
        let chunk_size = self.n() / reduction_chunk_count(self.n());
        self.map_shards(|i, shard| {
            let lo = self.data.offsets[i];
            let hi = self.data.offsets[i + 1];
            chunk_pieces(lo, hi, chunk_size)
                .into_iter()
                .map(|(chunk, a, b)| {
                    let locals: Vec<usize> = (a - lo..b - lo).collect();
                    Ok(ChunkPartial {
                        chunk,
                        value: per_rows_sum(shard, &locals)?,
                    })
                })
                .collect()
        })
    }

    /// Mean loss over the full training set.
    pub fn full_loss(&self, theta: &ParameterVector) -> Result<f64> {
        let partials =
            self.full_sum_partials(|shard, rows| model::loss_sum(&self.spec, theta, shard, Some(rows)))?;
        let chunks = merge_chunk_partials(partials, |a, b| a + b);
        Ok(deterministic_sum(&chunks) / self.n() as f64)
    }

    /// Misclassification rate over the full training set.
    pub fn full_error(&self, theta: &ParameterVector) -> Result<f64> {
        let counts = self.map_shards(|_, shard| {
            let targets = match &shard.targets {
                Targets::Classes(c) => c,
                Targets::Values(_) => {
                    return Err(Error::InvalidConfig(
                        "classification error needs class targets".into(),
                    ))
                }
            };
            model::misclassified_count(&self.spec, theta, &shard.inputs, targets, None)
        })?;
        Ok(counts.iter().sum::<usize>() as f64 / self.n() as f64)
    }

    /// Full-dataset mean gradient: per-chunk sums combined by the fixed
    /// tree reduce in position order, then one division by n. Equal to the
    /// mean-of-shard-means form up to floating-point regrouping, and
    /// exactly the serial gradient at N=1.
    pub fn distributed_gradient(&self, theta: &ParameterVector) -> Result<Vector> {
        let partials = self.full_sum_partials(|shard, rows| {
            model::gradient_sum(&self.spec, theta, shard, Some(rows))
        })?;
        let chunks = merge_chunk_partials(partials, add_vectors);
        Ok(deterministic_reduce(&chunks)?.scale(1.0 / self.n() as f64))
    }

    /// Draws a stratified mini-batch of size b: the permuted order is cut
    /// into b strata of ~n/b consecutive positions and one position is
    /// drawn per stratum. Consumes exactly b draws whatever N is, and the
    /// strata live in permutation space, so the chosen samples are
    /// identical for every worker count under the same RNG state.
    pub fn sample_assignment(&self, b: usize, rng: &mut ChaCha8Rng) -> Result<BatchAssignment> {
        let n = self.n();
        let n_workers = self.num_workers();
        if b == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if b > n {
            return Err(Error::InvalidConfig(format!(
                "batch size {b} exceeds dataset size {n}"
            )));
        }
        if b < n_workers {
            return Err(Error::InvalidConfig(format!(
                "batch size {b} leaves some of the {n_workers} workers without samples"
            )));
        }
        let mut per_shard: Vec<Vec<usize>> = vec![Vec::new(); n_workers];
        let mut shard = 0;
        for t in 0..b {
            let lo = t * n / b;
            let hi = (t + 1) * n / b;
            let p = rng.gen_range(lo..hi);
            // Positions ascend stratum by stratum, so a forward scan
            // locates the owning shard; rows sit in the shard at their
            // position offset because shards keep permuted order.
            while p >= self.data.offsets[shard + 1] {
                shard += 1;
            }
            per_shard[shard].push(p - self.data.offsets[shard]);
        }
        Ok(BatchAssignment { per_shard, b })
    }

    /// Mini-batch sums follow the same canonical-grid scheme as the full
    /// sums, but over the b sampled rows (one leaf per stratum, ascending
    /// by position). Each worker owns a contiguous leaf range; it splits
    /// that range at the leaf-grid boundaries and returns one partial per
    /// piece.
    fn curvature_product<F>(&self, assignment: &BatchAssignment, per_shard_sum: F) -> Result<Vector>
    where
        F: Fn(&Batch, &[usize]) -> Result<Vector> + Sync,
    {
        if assignment.per_shard.len() != self.num_workers() {
            return Err(Error::DimensionMismatch {
                context: "ParallelExecutor curvature product",
                expected: self.num_workers(),
                actual: assignment.per_shard.len(),
            });
        }
        let b = assignment.b;
        let chunk_size = b / reduction_chunk_count(b);
        let mut leaf_offsets = Vec::with_capacity(self.num_workers() + 1);
        let mut acc = 0;
        for locals in &assignment.per_shard {
            leaf_offsets.push(acc);
            acc += locals.len();
        }
        leaf_offsets.push(acc);
        debug_assert_eq!(acc, b);
        let partials = self.map_shards(|i, shard| {
            let lo = leaf_offsets[i];
            let hi = leaf_offsets[i + 1];
            let locals = &assignment.per_shard[i];
            chunk_pieces(lo, hi, chunk_size)
                .into_iter()
                .map(|(chunk, a, c)| {
                    Ok(ChunkPartial {
                        chunk,
                        value: per_shard_sum(shard, &locals[a - lo..c - lo])?,
                    })
                })
                .collect()
        })?;
        let chunks = merge_chunk_partials(partials, add_vectors);
        Ok(deterministic_reduce(&chunks)?.scale(1.0 / b as f64))
    }

    /// Mini-batch Hessian-vector product, reduced across workers the same
    /// way as the gradient (sums in shard order, one division by b).
    pub fn distributed_hvp(
        &self,
        theta: &ParameterVector,
        v: &Vector,
        assignment: &BatchAssignment,
    ) -> Result<Vector> {
        self.curvature_product(assignment, |shard, rows| {
            model::hessian_vec_sum(&self.spec, theta, shard, v, Some(rows))
        })
    }

    /// Mini-batch Gauss-Newton product; same reduction as distributed_hvp.
    pub fn distributed_gnvp(
        &self,
        theta: &ParameterVector,
        v: &Vector,
        assignment: &BatchAssignment,
    ) -> Result<Vector> {
        self.curvature_product(assignment, |shard, rows| {
            model::gauss_newton_vec_sum(&self.spec, theta, shard, v, Some(rows))
        })
    }

    /// Mini-batch mean gradient (the SGD update direction); same
    /// reduction as the curvature products.
    pub fn minibatch_gradient(
        &self,
        theta: &ParameterVector,
        assignment: &BatchAssignment,
    ) -> Result<Vector> {
        self.curvature_product(assignment, |shard, rows| {
            model::gradient_sum(&self.spec, theta, shard, Some(rows))
        })
    }
}

/// Integer communication-cost summary for one epoch of mini-batch
/// training under a given parallelisation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub floats_on_wire_per_epoch: u64,
    pub sync_rounds_per_epoch: u64,
    pub floats_stored_per_node: u64,
    /// Data-parallel only: the float count with the per-layer product
    /// d_{i−1}·d_i in place of d₀·d_i.
    pub floats_on_wire_corrected: Option<u64>,
}

fn check_cost_args(dims: &[usize], n: u64, b: u64, n_workers: u64) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(
            "cost model needs at least input and output dimensions".into(),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidConfig("layer dimensions must be positive".into()));
    }
    if n == 0 || b == 0 {
        return Err(Error::InvalidConfig("n and b must be positive".into()));
    }
    if n_workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    if n % b != 0 {
        return Err(Error::InvalidConfig(format!(
            "cost formulas are exact only when the batch size divides n ({n} % {b} != 0); \
             round n up to a multiple of b first"
        )));
    }
    Ok(())
}

/// Model parallelism: parameters sharded across N nodes, activations
/// synchronised at every layer crossing, forward and backward. Per epoch:
/// 2·(n/b)·b·Σdᵢ floats on the wire, 2·l·(n/b) sync rounds, and each node
/// stores ⌈d_{i−1}dᵢ/N⌉ floats per layer.
pub fn cost_model_parallel(dims: &[usize], n: u64, b: u64, n_workers: u64) -> Result<CostReport> {
    check_cost_args(dims, n, b, n_workers)?;
    let l = (dims.len() - 1) as u64;
    let batches = n / b;
    let hidden_and_output: u64 = dims[1..].iter().map(|&d| d as u64).sum();
    let stored: u64 = dims
        .windows(2)
        .map(|w| {
            let p = w[0] as u64 * w[1] as u64;
            p.div_ceil(n_workers)
        })
        .sum();
    Ok(CostReport {
        floats_on_wire_per_epoch: 2 * batches * b * hidden_and_output,
        sync_rounds_per_epoch: 2 * l * batches,
        floats_stored_per_node: stored,
        floats_on_wire_corrected: None,
    })
}

/// Data parallelism: parameters replicated, per-batch gradients reduced
/// over a binary tree of depth log₂(N). Per epoch: (n/b)·log₂(N)·Σ d₀·dᵢ
/// floats on the wire (with the Σ d_{i−1}·dᵢ variant reported alongside),
/// and exactly 2 sync rounds per batch regardless of N or depth.
pub fn cost_data_parallel(dims: &[usize], n: u64, b: u64, n_workers: u64) -> Result<CostReport> {
    check_cost_args(dims, n, b, n_workers)?;
    if !n_workers.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "data-parallel cost uses a log₂(N)-deep reduction tree; N={n_workers} is not a power of two"
        )));
    }
    let batches = n / b;
    let depth = n_workers.trailing_zeros() as u64;
    let d0 = dims[0] as u64;
    let literal: u64 = dims[1..].iter().map(|&d| d0 * d as u64).sum();
    let corrected: u64 = dims.windows(2).map(|w| w[0] as u64 * w[1] as u64).sum();
    Ok(CostReport {
        floats_on_wire_per_epoch: batches * depth * literal,
        sync_rounds_per_epoch: batches * 2,
        floats_stored_per_node: corrected,
        floats_on_wire_corrected: Some(batches * depth * corrected),
    })
}

/// Synchronisation rounds one Hessian-free iteration costs: one gradient
/// reduce, one reduce per operator application inside the inner solve, and
/// one per line-search objective evaluation.
pub fn comm_rounds_hf_per_iteration(inner_applies: u64, linesearch_evals: u64) -> u64 {
    1 + inner_applies + linesearch_evals
}
