"""Feature representations stored at octree corners, and their query paths.

Four representations share the octree's corner slots:

  - the compositional discrete embedding: each corner stores a B-vector of
    continuous indicator values v whose signs select, per bit, one of two
    shared offset banks; the corner embedding is
    ``e = bias + sum_j [(1-b_j) * off0_j + b_j * off1_j]`` with b = (v > 0).
    Only the shared bank and bias are D-dimensional; a finished corner
    costs ceil(B/8) bytes.
  - a low-resolution continuous complement stored at level-0 corners only;
  - a continuous baseline storing a D-vector at every corner of every
    level;
  - a softmax-indexing baseline storing per-corner logits over a 2^B-entry
    codebook. Training is straight-through like the indicators: the value
    comes from the argmax rows while the softmax mixture supplies the
    backward, so the trained field is the one the stored integer indices
    reproduce at inference.

Two equivalent query paths exist for the compositional embedding. The
efficient path interpolates the 8 corners' indicator bits first and runs
the composition once per query; the basic path materializes composed
embeddings for every stored corner and then gathers/interpolates. Both are
linear in the same quantities, so their outputs agree to rounding.

All forward functions return a cache consumed by the matching backward;
gradients are accumulated into caller-owned arrays. Binary indicators are
trained straight-through: hard values forward, sigmoid-derivative
surrogate backward. Passing ``soft=True`` replaces the hard values with
``sigmoid(v)`` end to end, which makes the backward the exact gradient of
the soft forward; finite-difference checks use that mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .octree import SparseOctree

INIT_SCALE = 1e-2  # uniform(-scale, scale) init for all feature parameters


def sigmoid(x):
    """Numerically stable logistic function.

    exp(-|x|) never overflows, and sigma(x) = 1 - sigma(-x) folds the
    negative half back; branch-free form, no boolean compaction copies.
    """
    x = np.asarray(x)
    p = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, p, 1.0 - p)


def ste_binarize(v):
    """Hard binary view of indicator values: 1 where v > 0, else 0.

    v = 0 maps to 0 (strict inequality); ties occur at init and must be
    deterministic. The training-time gradient is supplied by
    :func:`ste_backward`, not by this function.
    """
    v = np.asarray(v)
    return (v > 0).astype(v.dtype)


def ste_backward(v, grad_b):
    """Straight-through surrogate gradient: d(sigmoid)/dv at v, times grad_b."""
    s = sigmoid(np.asarray(v))
    return grad_b * s * (1.0 - s)


def scatter_add_rows(out, idx, vals):
    """out[idx] += vals with repeated indices accumulated, deterministically.

    Sort + reduceat keeps this away from np.add.at's per-element loop; the
    accumulation order is fixed by the stable sort, so results are
    reproducible run to run.
    """
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svals = vals[order]
    starts = np.flatnonzero(np.concatenate([[True], sidx[1:] != sidx[:-1]]))
    sums = np.add.reduceat(svals, starts, axis=0)
    out[sidx[starts]] += sums.astype(out.dtype, copy=False)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class ComponentVectorSet:
    """Shared bias and paired offset banks of the compositional embedding.

    Stores bias (D,), offsets_zero (B,D) and offsets_one (B,D). The
    single-bank view used by the naive composition — base embedding
    ``e_b = bias + sum_j off0_j`` and deltas ``off1_j - off0_j`` — is
    derived on demand, never stored.
    """

    def __init__(self, bias, offsets_zero, offsets_one):
        bias = np.asarray(bias)
        offsets_zero = np.asarray(offsets_zero)
        offsets_one = np.asarray(offsets_one)
        if offsets_zero.shape != offsets_one.shape or offsets_zero.ndim != 2:
            raise ValueError("offset banks must share a (B, D) shape")
        if bias.shape != (offsets_zero.shape[1],):
            raise ValueError("bias dimension must match offset dimension")
        for arr in (bias, offsets_zero, offsets_one):
            if not np.all(np.isfinite(arr)):
                raise ValueError("component vectors must be finite")
        self.bias = bias
        self.offsets_zero = offsets_zero
        self.offsets_one = offsets_one

    @classmethod
    def random(cls, dim, bitwidth, rng, scale=INIT_SCALE, dtype=np.float32):
        return cls(
            rng.uniform(-scale, scale, size=dim).astype(dtype),
            rng.uniform(-scale, scale, size=(bitwidth, dim)).astype(dtype),
            rng.uniform(-scale, scale, size=(bitwidth, dim)).astype(dtype),
        )

    @property
    def dimension(self):
        return self.bias.shape[0]

    @property
    def bitwidth(self):
        return self.offsets_zero.shape[0]

    @property
    def base_embedding(self):
        """e_b: the all-zero-indicator embedding."""
        return self.bias + self.offsets_zero.sum(axis=0)

    @property
    def offset_deltas(self):
        """Per-bit difference between the one-bank and zero-bank offsets."""
        return self.offsets_one - self.offsets_zero

    @property
    def weight_matrix(self):
        """(D, 2B) matrix with columns [off0_0..off0_{B-1}, off1_0..off1_{B-1}]."""
        return np.concatenate([self.offsets_zero, self.offsets_one], axis=0).T

    def byte_size(self):
        return (2 * self.bitwidth + 1) * self.dimension * 4


def compose(b, comps: ComponentVectorSet):
    """Compose one corner embedding from a binary indicator vector.

    e = bias + sum_j [(1-b_j) off0_j + b_j off1_j]; b entries must be 0/1.
    Accepts (..., B) batches.
    """
    b = np.asarray(b, dtype=comps.bias.dtype)
    if b.shape[-1] != comps.bitwidth:
        raise ValueError(f"indicator length {b.shape[-1]} != bitwidth {comps.bitwidth}")
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("compose expects hard 0/1 indicators")
    return comps.bias + (1.0 - b) @ comps.offsets_zero + b @ comps.offsets_one


def compose_linear(b_star, comps: ComponentVectorSet):
    """Linear-layer form of the composition: W b* + bias.

    b* is the concatenation of (1-b) and b; fractional entries are allowed,
    which is what makes interpolate-then-compose legal.
    """
    b_star = np.asarray(b_star, dtype=comps.bias.dtype)
    if b_star.shape[-1] != 2 * comps.bitwidth:
        raise ValueError(
            f"expected trailing dim {2 * comps.bitwidth}, got {b_star.shape[-1]}"
        )
    low, high = np.split(b_star, 2, axis=-1)
    return comps.bias + low @ comps.offsets_zero + high @ comps.offsets_one


class IndicatorField:
    """Continuous indicator vectors v, one (B,) row per discrete corner slot."""

    def __init__(self, vectors):
        self.vectors = [np.asarray(v) for v in vectors]
        for v in self.vectors:
            if not np.all(np.isfinite(v)):
                raise ValueError("indicator vectors must be finite")

    @classmethod
    def random(cls, tree: SparseOctree, bitwidth, rng, scale=INIT_SCALE, dtype=np.float32):
        return cls(
            [
                rng.uniform(-scale, scale, size=(tree.n_corners(l), bitwidth)).astype(dtype)
                for l in range(tree.height)
            ]
        )

    @property
    def bitwidth(self):
        return self.vectors[0].shape[1]

    def binary(self, level):
        return ste_binarize(self.vectors[level])

    def grown_to(self, counts, rng, scale=INIT_SCALE):
        """New field with rows appended to match per-level corner counts."""
        out = []
        for v, n in zip(self.vectors, counts):
            if n < len(v):
                raise ValueError("corner counts can only grow")
            extra = rng.uniform(-scale, scale, size=(n - len(v), v.shape[1]))
            out.append(np.concatenate([v, extra.astype(v.dtype)], axis=0))
        return IndicatorField(out)


class ContinuousField:
    """Low-resolution continuous complement: one D-vector per level-0 corner."""

    def __init__(self, values):
        self.values = np.asarray(values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("continuous embeddings must be finite")

    @classmethod
    def random(cls, tree: SparseOctree, dim, rng, scale=INIT_SCALE, dtype=np.float32):
        return cls(rng.uniform(-scale, scale, size=(tree.n_corners(0), dim)).astype(dtype))

    @property
    def dimension(self):
        return self.values.shape[1]

    def grown_to(self, count, rng, scale=INIT_SCALE):
        if count < len(self.values):
            raise ValueError("corner counts can only grow")
        extra = rng.uniform(-scale, scale, size=(count - len(self.values), self.dimension))
        return ContinuousField(np.concatenate([self.values, extra.astype(self.values.dtype)]))


class BaselineContinuousField:
    """Continuous baseline: a D-vector at every corner of every level."""

    def __init__(self, levels):
        self.levels = [np.asarray(v) for v in levels]
        for v in self.levels:
            if not np.all(np.isfinite(v)):
                raise ValueError("embeddings must be finite")

    @classmethod
    def random(cls, tree: SparseOctree, dim, rng, scale=INIT_SCALE, dtype=np.float32):
        return cls(
            [
                rng.uniform(-scale, scale, size=(tree.n_corners(l), dim)).astype(dtype)
                for l in range(tree.height)
            ]
        )

    @property
    def dimension(self):
        return self.levels[0].shape[1]

    def grown_to(self, counts, rng, scale=INIT_SCALE):
        out = []
        for v, n in zip(self.levels, counts):
            extra = rng.uniform(-scale, scale, size=(n - len(v), v.shape[1]))
            out.append(np.concatenate([v, extra.astype(v.dtype)], axis=0))
        return BaselineContinuousField(out)


class BaselineCodebook:
    """Softmax-indexing baseline: per-corner logits over a 2^B-row codebook."""

    def __init__(self, codebook, logits):
        self.codebook = np.asarray(codebook)
        self.logits = [np.asarray(v) for v in logits]
        if not np.all(np.isfinite(self.codebook)):
            raise ValueError("codebook must be finite")
        for lg in self.logits:
            if lg.shape[1] != self.codebook.shape[0]:
                raise ValueError("logit width must equal codebook size")

    @classmethod
    def random(cls, tree: SparseOctree, bitwidth, dim, rng, scale=INIT_SCALE, dtype=np.float32):
        size = 1 << bitwidth
        return cls(
            rng.uniform(-scale, scale, size=(size, dim)).astype(dtype),
            [
                rng.uniform(-scale, scale, size=(tree.n_corners(l), size)).astype(dtype)
                for l in range(tree.height)
            ],
        )

    @property
    def bitwidth(self):
        return int(self.codebook.shape[0]).bit_length() - 1

    @property
    def dimension(self):
        return self.codebook.shape[1]

    def grown_to(self, counts, rng, scale=INIT_SCALE):
        out = []
        for v, n in zip(self.logits, counts):
            extra = rng.uniform(-scale, scale, size=(n - len(v), v.shape[1]))
            out.append(np.concatenate([v, extra.astype(v.dtype)], axis=0))
        return BaselineCodebook(self.codebook, out)


# ---------------------------------------------------------------------------
# gradient containers
# ---------------------------------------------------------------------------


@dataclass
class DecompositionGrads:
    indicators: list
    bias: np.ndarray
    offsets_zero: np.ndarray
    offsets_one: np.ndarray

    @classmethod
    def zeros_like(cls, indicators: IndicatorField, comps: ComponentVectorSet):
        return cls(
            [np.zeros_like(v) for v in indicators.vectors],
            np.zeros_like(comps.bias),
            np.zeros_like(comps.offsets_zero),
            np.zeros_like(comps.offsets_one),
        )


@dataclass
class IndexingGrads:
    codebook: np.ndarray
    logits: list

    @classmethod
    def zeros_like(cls, cb: BaselineCodebook):
        return cls(np.zeros_like(cb.codebook), [np.zeros_like(v) for v in cb.logits])


# ---------------------------------------------------------------------------
# query paths: compositional embedding
# ---------------------------------------------------------------------------


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def indicator_tables(indicators: IndicatorField, soft=False):
    """Per-level corner bit tables, shared across one iteration's forwards.

    Binarization (or sigmoid in soft mode) is elementwise, so evaluating it
    once over the stored corners and gathering is bit-identical to
    evaluating on gathered copies; amortizing it here is the efficient
    path's analogue of the basic path's corner tables. Hard bits cost one
    comparison per stored scalar, keeping the per-iteration overhead tiny
    next to the basic path's full composition.
    """
    return [sigmoid(v) if soft else ste_binarize(v)
            for v in indicators.vectors]


def discrete_forward(stencils, indicators: IndicatorField, comps: ComponentVectorSet,
                     soft=False, tables=None):
    """Efficient path: interpolate indicator bits, compose once per query.

    Per hit level, the interpolated b* is [low, wsum] with
    wsum = sum_c w_c b_c and low = sum_c w_c (1 - b_c); both sums are taken
    directly so that a uniform bit state zeroes the complementary bank
    exactly, not just up to the rounding of the weight sum. Missed levels
    contribute a zero vector. Returns (z (N,D), cache). ``tables`` holds
    precomputed :func:`indicator_tables` output to reuse across forwards;
    hard mode then defers the STE slope: the backward scatters raw
    interpolation gradients and the iteration owner multiplies the
    accumulated per-corner gradient by sigma' once, exactly as the basic
    path's field backward does (see :func:`apply_ste_slope_inplace`).
    """
    dtype = comps.bias.dtype
    n = len(stencils[0][0])
    z = np.zeros((n, comps.dimension), dtype=dtype)
    level_caches = []
    for level, (hit, slots, w) in enumerate(stencils):
        if tables is None:
            v = indicators.vectors[level][slots]      # (N,8,B)
            sig = sigmoid(v)
            b = sig if soft else ste_binarize(v)
            slope = sig * (1.0 - sig)
        elif soft:
            b = tables[level][slots]
            slope = b * (1.0 - b)                      # sigma' from sigma
        else:
            b = tables[level][slots]
            slope = None                               # deferred to owner
        wf = w.astype(dtype, copy=False)
        hitf = hit.astype(dtype)
        wsum = np.einsum("nc,ncb->nb", wf, b)          # interp of b
        low = np.einsum("nc,ncb->nb", wf, 1.0 - b)     # interp of (1-b)
        z += low @ comps.offsets_zero + wsum @ comps.offsets_one
        z += hitf[:, None] * comps.bias
        level_caches.append((hit, slots, wf, slope, low, wsum))
    return z, ("efficient", level_caches)


def discrete_backward(cache, grad_z, grads: DecompositionGrads,
                      comps: ComponentVectorSet):
    """Adjoint of :func:`discrete_forward` for one query batch.

    When the forward deferred the STE slope (hard mode with tables), the
    scattered indicator gradients are still in grad-of-b form and the
    iteration owner must finish them with :func:`apply_ste_slope_inplace`.
    """
    kind, level_caches = cache
    if kind != "efficient":
        raise ValueError("cache does not belong to the efficient path")
    delta = comps.offset_deltas                        # off1 - off0, (B,D)
    for level, (hit, slots, wf, slope, low, wsum) in enumerate(level_caches):
        gz = grad_z * hit[:, None].astype(grad_z.dtype)
        grads.bias += gz.sum(axis=0)
        grads.offsets_zero += low.T @ gz
        grads.offsets_one += wsum.T @ gz
        grad_wsum = gz @ delta.T                       # (N,B)
        hits = np.flatnonzero(hit)
        if len(hits) == 0:
            continue
        hslots = slots[hits]
        # per corner: grad_b = w_c * grad_wsum, then the STE sigmoid factor
        gb = wf[hits][:, :, None] * grad_wsum[hits][:, None, :]   # (H,8,B)
        gv = gb if slope is None else gb * slope[hits]
        scatter_add_rows(
            grads.indicators[level],
            hslots.ravel(),
            gv.reshape(-1, gv.shape[2]),
        )


def apply_ste_slope_inplace(indicator_grads, indicators: IndicatorField):
    """Finish deferred indicator gradients: multiply by sigma' per corner.

    Accumulated grad-of-b times the surrogate slope at the stored value;
    one dense elementwise pass per level, the same association the basic
    path's :func:`compose_field_backward` uses.
    """
    for g, v in zip(indicator_grads, indicators.vectors):
        sig = sigmoid(v)
        g *= sig * (1.0 - sig)


def compose_field(indicators: IndicatorField, comps: ComponentVectorSet, soft=False):
    """Basic path, step 1: compose an embedding for every stored corner.

    This is the naive implementation's per-iteration cost: it touches all
    N_V corners regardless of how few the batch queries.
    """
    tables = []
    bcache = []
    for v in indicators.vectors:
        sig = sigmoid(v)
        b = sig if soft else ste_binarize(v)
        table = compose_linear(np.concatenate([1.0 - b, b], axis=-1), comps)
        tables.append(table)
        bcache.append((sig, b))
    return tables, bcache


def table_forward(stencils, tables):
    """Basic path, step 2: gather pre-composed embeddings and interpolate."""
    dtype = tables[0].dtype
    n = len(stencils[0][0])
    z = np.zeros((n, tables[0].shape[1]), dtype=dtype)
    qcache = []
    for level, (hit, slots, w) in enumerate(stencils):
        e = tables[level][slots]                       # (N,8,D)
        wf = w.astype(dtype, copy=False)
        z += np.einsum("nc,ncd->nd", wf, e)
        qcache.append((hit, slots, wf))
    return z, qcache


def table_backward(qcache, grad_z, table_grads):
    """Adjoint of :func:`table_forward`: scatter grads onto corner embeddings."""
    for level, (hit, slots, wf) in enumerate(qcache):
        hits = np.flatnonzero(hit)
        if len(hits) == 0:
            continue
        vals = wf[hits][:, :, None] * grad_z[hits][:, None, :]   # (H,8,D)
        scatter_add_rows(
            table_grads[level], slots[hits].ravel(), vals.reshape(-1, grad_z.shape[1])
        )


def compose_field_backward(bcache, table_grads, grads: DecompositionGrads,
                           comps: ComponentVectorSet):
    """Adjoint of :func:`compose_field`: full-field composition gradients."""
    delta = comps.offset_deltas
    for level, (sig, b) in enumerate(bcache):
        ge = table_grads[level]                        # (N_l, D)
        grads.bias += ge.sum(axis=0)
        grads.offsets_zero += (1.0 - b).T @ ge
        grads.offsets_one += b.T @ ge
        gb = ge @ delta.T
        grads.indicators[level] += gb * sig * (1.0 - sig)


def query_feature_discrete(stencils, indicators, comps, path="efficient", soft=False):
    """Discrete feature z for a query batch, by either equivalent path."""
    if path == "efficient":
        z, _ = discrete_forward(stencils, indicators, comps, soft=soft)
        return z
    if path == "basic":
        tables, _ = compose_field(indicators, comps, soft=soft)
        z, _ = table_forward(stencils, tables)
        return z
    raise ValueError(f"unknown path {path!r}")


# ---------------------------------------------------------------------------
# query paths: continuous fields
# ---------------------------------------------------------------------------


def interp_forward(stencil, values):
    """Trilinear interpolation of per-corner vectors at one level."""
    hit, slots, w = stencil
    e = values[slots]
    wf = w.astype(values.dtype, copy=False)
    z = np.einsum("nc,ncd->nd", wf, e)
    return z, (hit, slots, wf)


def interp_backward(cache, grad_z, grad_values):
    hit, slots, wf = cache
    hits = np.flatnonzero(hit)
    if len(hits) == 0:
        return
    vals = wf[hits][:, :, None] * grad_z[hits][:, None, :]
    scatter_add_rows(grad_values, slots[hits].ravel(), vals.reshape(-1, grad_z.shape[1]))


def query_feature_full(stencils, indicators, comps, cont: ContinuousField,
                       path="efficient", soft=False):
    """Discrete term plus the level-0 continuous complement."""
    z = query_feature_discrete(stencils, indicators, comps, path=path, soft=soft)
    zc, _ = interp_forward(stencils[0], cont.values)
    return z + zc


def query_feature_baseline_continuous(stencils, field: BaselineContinuousField):
    """Continuous baseline: interpolate stored D-vectors per level and sum."""
    z = None
    for level, stencil in enumerate(stencils):
        zl, _ = interp_forward(stencil, field.levels[level])
        z = zl if z is None else z + zl
    return z


# ---------------------------------------------------------------------------
# query paths: softmax-indexing baseline
# ---------------------------------------------------------------------------


def indexing_forward(stencils, cb: BaselineCodebook, hard=False):
    """Indexing baseline feature query.

    Training (hard=False) mixes the codebook with per-corner softmax
    weights, interpolating the probability vectors before the single
    codebook product. Inference (hard=True) gathers argmax rows per corner
    and interpolates embeddings.
    """
    dtype = cb.codebook.dtype
    n = len(stencils[0][0])
    z = np.zeros((n, cb.dimension), dtype=dtype)
    caches = []
    for level, (hit, slots, w) in enumerate(stencils):
        lg = cb.logits[level][slots]                   # (N,8,K)
        wf = w.astype(dtype, copy=False)
        if hard:
            e = cb.codebook[np.argmax(lg, axis=-1)]    # (N,8,D)
            z += np.einsum("nc,ncd->nd", wf, e)
            caches.append(None)
        else:
            p = _softmax(lg)
            pbar = np.einsum("nc,nck->nk", wf, p)      # (N,K)
            z += pbar @ cb.codebook
            caches.append((hit, slots, wf, p, pbar))
    return z, caches


def indexing_ste_forward(stencils, cb: BaselineCodebook):
    """Straight-through indexing query for training.

    The returned value gathers argmax rows exactly as inference does; the
    cache keeps the softmax mixture, so `indexing_backward` still routes
    gradient to every logit and codebook row. Soft-only training leaves the
    mixtures too diffuse for the argmax snap to preserve the field; tying
    the forward to the stored representation removes that gap.
    """
    dtype = cb.codebook.dtype
    n = len(stencils[0][0])
    z = np.zeros((n, cb.dimension), dtype=dtype)
    caches = []
    for level, (hit, slots, w) in enumerate(stencils):
        lg = cb.logits[level][slots]                   # (N,8,K)
        wf = w.astype(dtype, copy=False)
        p = _softmax(lg)
        pbar = np.einsum("nc,nck->nk", wf, p)
        e = cb.codebook[np.argmax(lg, axis=-1)]        # (N,8,D)
        z += np.einsum("nc,ncd->nd", wf, e)
        caches.append((hit, slots, wf, p, pbar))
    return z, caches


def indexing_backward(caches, grad_z, grads: IndexingGrads, cb: BaselineCodebook):
    """Adjoint of the soft indexing forward."""
    for level, cache in enumerate(caches):
        if cache is None:
            raise ValueError("hard-path cache cannot be backpropagated")
        hit, slots, wf, p, pbar = cache
        gz = grad_z * hit[:, None].astype(grad_z.dtype)
        grads.codebook += pbar.T @ gz
        gpbar = gz @ cb.codebook.T                     # (N,K)
        gp = wf[:, :, None] * gpbar[:, None, :]        # (N,8,K)
        glg = p * (gp - np.sum(p * gp, axis=-1, keepdims=True))
        hits = np.flatnonzero(hit)
        scatter_add_rows(
            grads.logits[level], slots[hits].ravel(), glg[hits].reshape(-1, glg.shape[2])
        )


def indexing_compose_field(cb: BaselineCodebook, hard=False):
    """Basic-path table for the indexing baseline: embed every corner."""
    tables = []
    pcache = []
    for lg in cb.logits:
        if hard:
            tables.append(cb.codebook[np.argmax(lg, axis=-1)])
            pcache.append(None)
        else:
            p = _softmax(lg)
            tables.append(p @ cb.codebook)
            pcache.append(p)
    return tables, pcache


def indexing_ste_compose_field(cb: BaselineCodebook):
    """Basic-path tables for straight-through indexing training.

    Tables hold the argmax rows (the inference field); the probability
    cache feeds `indexing_field_backward` with the softmax surrogate.
    """
    tables = [cb.codebook[np.argmax(lg, axis=-1)] for lg in cb.logits]
    pcache = [_softmax(lg) for lg in cb.logits]
    return tables, pcache


def indexing_field_backward(pcache, table_grads, grads: IndexingGrads,
                            cb: BaselineCodebook):
    for level, p in enumerate(pcache):
        if p is None:
            raise ValueError("hard-path table cannot be backpropagated")
        ge = table_grads[level]
        grads.codebook += p.T @ ge
        gp = ge @ cb.codebook.T
        grads.logits[level] += p * (gp - np.sum(p * gp, axis=-1, keepdims=True))


def query_feature_baseline_indexing(stencils, cb: BaselineCodebook, hard=False):
    z, _ = indexing_forward(stencils, cb, hard=hard)
    return z


# ---------------------------------------------------------------------------
# cost model and storage accounting
# ---------------------------------------------------------------------------


def composition_madds_per_query(mode, bitwidth, dim, n_levels=1):
    """Multiply-adds spent combining corner features into one query feature.

    Derived from the array shapes each path touches per hit level:
    interpolation of the 8 corners' selector vectors plus one mixing
    product. The compositional path's selector is 2B wide; the indexing
    path's is 2^B wide, so its cost grows with the embedding-space size.
    """
    if mode in ("decomposition", "decomposition_discrete_only"):
        width = 2 * bitwidth
    elif mode == "indexing":
        width = 1 << bitwidth
    elif mode == "continuous":
        return n_levels * 8 * dim
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return n_levels * (8 * width + width * dim)


@dataclass
class StorageReport:
    """Byte accounting mirroring the representation/total storage split."""

    mode: str
    bitwidth: int
    dimension: int
    indicator_bytes: int = 0
    continuous_bytes: int = 0
    component_bytes: int = 0
    codebook_bytes: int = 0
    embedding_bytes: int = 0
    decoder_bytes: int = 0
    morton_bytes: int = 0
    corners_per_level: tuple = ()
    total_voxels: int = 0

    @property
    def rep_bytes(self):
        return (
            self.indicator_bytes
            + self.continuous_bytes
            + self.component_bytes
            + self.codebook_bytes
            + self.embedding_bytes
            + self.decoder_bytes
        )

    @property
    def total_bytes(self):
        return self.rep_bytes + self.morton_bytes

    def as_dict(self):
        d = {k: getattr(self, k) for k in (
            "mode", "bitwidth", "dimension", "indicator_bytes", "continuous_bytes",
            "component_bytes", "codebook_bytes", "embedding_bytes", "decoder_bytes",
            "morton_bytes", "total_voxels")}
        d["corners_per_level"] = list(self.corners_per_level)
        d["rep_bytes"] = self.rep_bytes
        d["total_bytes"] = self.total_bytes
        return d


MODES = ("decomposition", "decomposition_discrete_only", "continuous", "indexing")


def storage_report(tree: SparseOctree, mode, bitwidth, dim, decoder_bytes):
    """Serialized size of the map representation, by mode.

    Discrete corners cost ceil(B/8) bytes (bit-packed indicators or
    codebook indices); continuous corners cost 4*D bytes; the shared
    component set costs (2B+1)*D*4; the codebook costs 2^B*D*4. The total
    adds the spatial model: one 8-byte Morton code per voxel at every
    level. Decoder parameters count toward the representation.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    corners = tuple(tree.n_corners(l) for l in range(tree.height))
    total_corners = sum(corners)
    rep = StorageReport(
        mode=mode,
        bitwidth=bitwidth,
        dimension=dim,
        decoder_bytes=decoder_bytes,
        morton_bytes=8 * tree.total_voxels,
        corners_per_level=corners,
        total_voxels=tree.total_voxels,
    )
    packed = (bitwidth + 7) // 8
    if mode == "decomposition":
        rep.indicator_bytes = packed * total_corners
        rep.continuous_bytes = 4 * dim * corners[0]
        rep.component_bytes = (2 * bitwidth + 1) * dim * 4
    elif mode == "decomposition_discrete_only":
        rep.indicator_bytes = packed * total_corners
        rep.component_bytes = (2 * bitwidth + 1) * dim * 4
    elif mode == "continuous":
        rep.embedding_bytes = 4 * dim * total_corners
    elif mode == "indexing":
        rep.indicator_bytes = packed * total_corners
        rep.codebook_bytes = (1 << bitwidth) * dim * 4
    return rep


# ---------------------------------------------------------------------------
# bit packing (checkpoint layout)
# ---------------------------------------------------------------------------


def pack_indicator_bits(bits):
    """Pack (N,B) 0/1 rows into (N, ceil(B/8)) bytes, bit j at position j%8."""
    bits = np.asarray(bits)
    return np.packbits(bits.astype(np.uint8), axis=1, bitorder="little")


def unpack_indicator_bits(packed, bitwidth):
    """Inverse of :func:`pack_indicator_bits`."""
    out = np.unpackbits(packed, axis=1, count=bitwidth, bitorder="little")
    return out
