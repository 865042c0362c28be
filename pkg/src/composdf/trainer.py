"""Joint optimization of corner features and decoder, plus persistence.

The trainable state couples a sparse octree with one of four feature
representations (compositional discrete, discrete without the continuous
complement, continuous-per-corner, softmax indexing) and a shared scalar
decoder. One loss step is:

  - a binary-cross-entropy term matching sigmoid(phi) to
    sigmoid(label / s) per sample, whose phi-gradient is
    sigmoid(phi) - sigmoid(label / s);
  - an Eikonal term (|grad(s * phi)| - 1)^2 on the metric distance field
    s * phi, with the spatial gradient taken by symmetric finite
    differences of six extra forward passes, so its parameter gradient
    flows through all six; samples with any probe outside the map at
    every level are skipped.

The decoder output phi is the logit of the surface-crossing probability:
the field trained to match label/s. The reconstructed signed distance in
meters is s * phi; both terms agree that its gradient norm should be one
(label slope 1/s in logit units), which is what lets free-space targets
saturate without fighting the Eikonal term.

All gradients are hand-written adjoints of the forward code; binarized
indicators train straight-through (hard forward, sigmoid-derivative
backward). ``soft_indicators=True`` swaps every straight-through hard
forward for its smooth relaxation end to end (sigmoid indicators for the
compositional modes, softmax mixtures for the codebook baseline), making
the analytic gradients exact for finite-difference validation.

The discrete and indexing representations run in one of two
implementations: "efficient" interpolates selector vectors per query and
composes once per query point; "basic" composes an embedding for every
stored corner once per iteration and then gathers. Their outputs agree;
their cost scales with batch size versus total corner count.

Checkpoints capture the quantized map, not resumable optimizer state:
indicators are stored as packed bits and reloaded as synthetic values of
matching sign, and the indexing baseline stores argmax code indices.
Forward outputs are bit-identical across a save/load cycle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import embedding as emb
from .decoder import DecoderGrads, SdfDecoder
from .octree import OctreeConfig, SparseOctree, build_octree
from .sampler import DataError, sample_scan

CHECKPOINT_MAGIC = b"DNMP"
CHECKPOINT_VERSION = 1

SIGMOID_CLAMP = 15.0
LOG_CLAMP = 1e-7
GRAD_NORM_FLOOR = 1e-12


class FormatError(ValueError):
    """Checkpoint bytes that do not follow the documented layout."""


class TrainingDiverged(RuntimeError):
    """Non-finite gradients; the optimizer refused to apply the step."""


@dataclass(frozen=True)
class LossConfig:
    s: float                      # sigmoid flatness scale (meters); s*phi is metric
    lam: float = 0.1              # Eikonal weight
    eikonal_step: float = 0.01    # finite-difference probe offset (meters)

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("s must be positive")
        if self.lam < 0:
            raise ValueError("eikonal weight must be nonnegative")
        if self.eikonal_step <= 0:
            raise ValueError("eikonal step must be positive")


# ---------------------------------------------------------------------------
# map state
# ---------------------------------------------------------------------------


class MapState:
    """Octree + feature representation + decoder for one mode."""

    def __init__(self, tree: SparseOctree, mode, decoder: SdfDecoder,
                 indicators=None, comps=None, cont=None, baseline=None,
                 codebook=None, implementation="efficient"):
        if mode not in emb.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if implementation not in ("efficient", "basic"):
            raise ValueError(f"unknown implementation {implementation!r}")
        self.tree = tree
        self.mode = mode
        self.decoder = decoder
        self.indicators = indicators
        self.comps = comps
        self.cont = cont
        self.baseline = baseline
        self.codebook = codebook
        self.implementation = implementation

    @classmethod
    def create(cls, tree, mode, bitwidth, dim, rng, implementation="efficient",
               dtype=np.float32):
        decoder = SdfDecoder.random(dim, rng, dtype=dtype)
        if mode in ("decomposition", "decomposition_discrete_only"):
            indicators = emb.IndicatorField.random(tree, bitwidth, rng, dtype=dtype)
            comps = emb.ComponentVectorSet.random(dim, bitwidth, rng, dtype=dtype)
            cont = (emb.ContinuousField.random(tree, dim, rng, dtype=dtype)
                    if mode == "decomposition" else None)
            return cls(tree, mode, decoder, indicators=indicators, comps=comps,
                       cont=cont, implementation=implementation)
        if mode == "continuous":
            baseline = emb.BaselineContinuousField.random(tree, dim, rng, dtype=dtype)
            return cls(tree, mode, decoder, baseline=baseline,
                       implementation=implementation)
        baseline_cb = emb.BaselineCodebook.random(tree, bitwidth, dim, rng, dtype=dtype)
        return cls(tree, mode, decoder, codebook=baseline_cb,
                   implementation=implementation)

    @property
    def dim(self):
        return self.decoder.dim

    @property
    def bitwidth(self):
        if self.indicators is not None:
            return self.indicators.bitwidth
        if self.codebook is not None:
            return self.codebook.bitwidth
        return 0

    @property
    def dtype(self):
        return self.decoder.w1.dtype

    def param_items(self):
        """Ordered (name, array) pairs covering every trainable array."""
        items = [(f"dec/{n}", a) for n, a in self.decoder.param_arrays()]
        if self.indicators is not None:
            items += [(f"ind/{l}", v) for l, v in enumerate(self.indicators.vectors)]
            items += [("comps/bias", self.comps.bias),
                      ("comps/off0", self.comps.offsets_zero),
                      ("comps/off1", self.comps.offsets_one)]
        if self.cont is not None:
            items.append(("cont", self.cont.values))
        if self.baseline is not None:
            items += [(f"emb/{l}", v) for l, v in enumerate(self.baseline.levels)]
        if self.codebook is not None:
            items.append(("cb/codebook", self.codebook.codebook))
            items += [(f"cb/logits/{l}", v) for l, v in enumerate(self.codebook.logits)]
        return items

    def grad_items(self, grads: "TrainGrads"):
        items = [(f"dec/{n}", a) for n, a in grads.decoder.arrays()]
        if self.indicators is not None:
            items += [(f"ind/{l}", v) for l, v in enumerate(grads.embed.indicators)]
            items += [("comps/bias", grads.embed.bias),
                      ("comps/off0", grads.embed.offsets_zero),
                      ("comps/off1", grads.embed.offsets_one)]
        if self.cont is not None:
            items.append(("cont", grads.cont))
        if self.baseline is not None:
            items += [(f"emb/{l}", v) for l, v in enumerate(grads.embed)]
        if self.codebook is not None:
            items.append(("cb/codebook", grads.embed.codebook))
            items += [(f"cb/logits/{l}", v) for l, v in enumerate(grads.embed.logits)]
        return items

    def extended_with_points(self, points, rng):
        """Grow the octree to cover new points; fields keep existing rows."""
        new_tree = self.tree.extend(points)
        counts = [new_tree.n_corners(l) for l in range(new_tree.height)]
        ind = (self.indicators.grown_to(counts, rng)
               if self.indicators is not None else None)
        cont = self.cont.grown_to(counts[0], rng) if self.cont is not None else None
        base = self.baseline.grown_to(counts, rng) if self.baseline is not None else None
        cb = self.codebook.grown_to(counts, rng) if self.codebook is not None else None
        return MapState(new_tree, self.mode, self.decoder, indicators=ind,
                        comps=self.comps, cont=cont, baseline=base, codebook=cb,
                        implementation=self.implementation)

    # -- inference ----------------------------------------------------------

    def phi_eval(self, points, chunk=65536):
        """Decoded field values for (N,3) world points, inference path.

        All modes evaluate exactly as the training forward: discrete
        selections (indicator bits, argmax codebook rows) are already hard
        there, so the trained field is the one reproduced here.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points), dtype=self.dtype)
        for lo in range(0, len(points), chunk):
            pts = points[lo: lo + chunk]
            st = self.tree.query_stencil_batch(pts)
            z = self._feature_eval(st)
            out[lo: lo + chunk] = self.decoder.forward(z)[0]
        return out

    def _feature_eval(self, stencils):
        if self.mode in ("decomposition", "decomposition_discrete_only"):
            z = emb.query_feature_discrete(stencils, self.indicators, self.comps)
            if self.cont is not None:
                z = z + emb.interp_forward(stencils[0], self.cont.values)[0]
            return z
        if self.mode == "continuous":
            return emb.query_feature_baseline_continuous(stencils, self.baseline)
        return emb.query_feature_baseline_indexing(stencils, self.codebook, hard=True)

    def hit_mask(self, points, chunk=65536):
        """True where a point is inside the allocated volume at any level."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.zeros(len(points), dtype=bool)
        for lo in range(0, len(points), chunk):
            st = self.tree.query_stencil_batch(points[lo: lo + chunk])
            out[lo: lo + chunk] = np.any([hit for hit, _, _ in st], axis=0)
        return out

    def storage(self):
        mode = self.mode
        return emb.storage_report(self.tree, mode, self.bitwidth, self.dim,
                                  self.decoder.byte_size())


@dataclass
class TrainGrads:
    decoder: DecoderGrads
    embed: object = None          # mode-specific container
    cont: np.ndarray = None

    @classmethod
    def zeros_like(cls, state: MapState):
        dec = DecoderGrads.zeros_like(state.decoder)
        if state.indicators is not None:
            embed = emb.DecompositionGrads.zeros_like(state.indicators, state.comps)
            cont = (np.zeros_like(state.cont.values)
                    if state.cont is not None else None)
            return cls(dec, embed, cont)
        if state.baseline is not None:
            return cls(dec, [np.zeros_like(v) for v in state.baseline.levels])
        return cls(dec, emb.IndexingGrads.zeros_like(state.codebook))


# ---------------------------------------------------------------------------
# forward/backward orchestration (one object per training iteration)
# ---------------------------------------------------------------------------


class IterationContext:
    """Shares the basic path's per-iteration corner tables across the main
    and probe forwards of one loss evaluation."""

    def __init__(self, state: MapState, soft=False):
        self.state = state
        self.soft = soft
        self.basic = (state.implementation == "basic"
                      and state.mode != "continuous")
        self.table_grads = None
        self.itables = None
        if self.basic:
            if state.mode == "indexing":
                if soft:
                    self.tables, self.pcache = emb.indexing_compose_field(
                        state.codebook, hard=False)
                else:
                    self.tables, self.pcache = emb.indexing_ste_compose_field(
                        state.codebook)
            else:
                self.tables, self.bcache = emb.compose_field(
                    state.indicators, state.comps, soft=soft)
        elif state.indicators is not None:
            self.itables = emb.indicator_tables(state.indicators, soft=soft)

    def forward(self, points):
        state = self.state
        st = state.tree.query_stencil_batch(points)
        ccache = None
        if state.mode in ("decomposition", "decomposition_discrete_only"):
            if self.basic:
                z, mcache = emb.table_forward(st, self.tables)
            else:
                z, mcache = emb.discrete_forward(st, state.indicators, state.comps,
                                                 soft=self.soft,
                                                 tables=self.itables)
            if state.cont is not None:
                zc, ccache = emb.interp_forward(st[0], state.cont.values)
                z = z + zc
        elif state.mode == "continuous":
            z = None
            mcache = []
            for level, stencil in enumerate(st):
                zl, cl = emb.interp_forward(stencil, state.baseline.levels[level])
                z = zl if z is None else z + zl
                mcache.append(cl)
        else:
            if self.basic:
                z, mcache = emb.table_forward(st, self.tables)
            elif self.soft:
                z, mcache = emb.indexing_forward(st, state.codebook, hard=False)
            else:
                z, mcache = emb.indexing_ste_forward(st, state.codebook)
        phi, dcache = state.decoder.forward(z)
        return phi, (st, mcache, ccache, dcache)

    def backward(self, cache, grad_phi, grads: TrainGrads):
        state = self.state
        st, mcache, ccache, dcache = cache
        dgrads, gz = state.decoder.backward(dcache, grad_phi)
        grads.decoder.add_(dgrads)
        if state.mode in ("decomposition", "decomposition_discrete_only"):
            if self.basic:
                self._ensure_table_grads()
                emb.table_backward(mcache, gz, self.table_grads)
            else:
                emb.discrete_backward(mcache, gz, grads.embed, state.comps)
            if ccache is not None:
                emb.interp_backward(ccache, gz, grads.cont)
        elif state.mode == "continuous":
            for level, cl in enumerate(mcache):
                emb.interp_backward(cl, gz, grads.embed[level])
        else:
            if self.basic:
                self._ensure_table_grads()
                emb.table_backward(mcache, gz, self.table_grads)
            else:
                emb.indexing_backward(mcache, gz, grads.embed, state.codebook)

    def finalize(self, grads: TrainGrads):
        """Convert accumulated table or deferred gradients into parameter
        gradients."""
        if self.itables is not None and not self.soft:
            emb.apply_ste_slope_inplace(grads.embed.indicators,
                                        self.state.indicators)
            return
        if not self.basic or self.table_grads is None:
            return
        if self.state.mode == "indexing":
            emb.indexing_field_backward(self.pcache, self.table_grads,
                                        grads.embed, self.state.codebook)
        else:
            emb.compose_field_backward(self.bcache, self.table_grads,
                                       grads.embed, self.state.comps)

    def _ensure_table_grads(self):
        if self.table_grads is None:
            self.table_grads = [np.zeros_like(t) for t in self.tables]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def clamped_sigmoid(x):
    return emb.sigmoid(np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP))


def sdf_loss_terms(phi, labels, s):
    """Per-sample BCE between sigmoid(phi) and sigmoid(label/s).

    Returns (loss values, d loss / d phi). The gradient uses the exact
    closed form sigmoid(phi) - sigmoid(label/s); the forward clamps its
    log arguments, which only matters at saturation.
    """
    p = clamped_sigmoid(phi)
    y = clamped_sigmoid(np.asarray(labels, dtype=p.dtype) / p.dtype.type(s))
    pc = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return loss, p - y


def sdf_loss(phi, label, s):
    """Scalar convenience wrapper over :func:`sdf_loss_terms`."""
    loss, _ = sdf_loss_terms(np.atleast_1d(np.asarray(phi, dtype=np.float64)),
                             np.atleast_1d(label), s)
    return float(loss[0])


_PROBE_SIGNS = np.array([
    [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
], dtype=np.float64)


def _probe_points(points, eps):
    probes = points[:, None, :] + eps * _PROBE_SIGNS[None, :, :]
    return probes.reshape(-1, 3)


def eikonal_loss(state: MapState, points, eikonal_step, s=1.0):
    """Mean (|grad(s*phi)| - 1)^2 over samples whose six probes all hit.

    The unit-gradient target applies to the metric field s*phi, not the
    logit output. Forward-only convenience used by tests; training fuses
    this with the main loss in :func:`total_loss`.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ctx = IterationContext(state)
    phi_p, cache = ctx.forward(_probe_points(points, eikonal_step))
    st = cache[0]
    hit_any = np.any([hit for hit, _, _ in st], axis=0).reshape(-1, 6)
    eligible = np.all(hit_any, axis=1)
    if not eligible.any():
        return 0.0
    g = (phi_p.reshape(-1, 6)[:, 0::2] - phi_p.reshape(-1, 6)[:, 1::2])
    g = g / (2.0 * eikonal_step)
    norms = s * np.sqrt(np.sum(g.astype(np.float64) ** 2, axis=1))
    return float(np.mean((norms[eligible] - 1.0) ** 2))


def total_loss(state: MapState, points, labels, cfg: LossConfig,
               soft_indicators=False):
    """One full loss evaluation with gradients for every parameter group.

    Returns (total, sdf component, eikonal component, TrainGrads). The
    eikonal component is averaged over eligible samples only; lam == 0
    skips the probe forwards entirely.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        raise DataError("empty batch")
    ctx = IterationContext(state, soft=soft_indicators)
    grads = TrainGrads.zeros_like(state)

    phi, cache = ctx.forward(points)
    loss_vec, dphi = sdf_loss_terms(phi, labels, cfg.s)
    sdf_mean = float(loss_vec.mean())
    ctx.backward(cache, dphi / len(points), grads)

    eik_mean = 0.0
    if cfg.lam > 0.0:
        eps = cfg.eikonal_step
        phi_p, cache_p = ctx.forward(_probe_points(points, eps))
        st_p = cache_p[0]
        hit_any = np.any([hit for hit, _, _ in st_p], axis=0).reshape(-1, 6)
        eligible = np.all(hit_any, axis=1)
        n_elig = int(eligible.sum())
        if n_elig:
            pp = phi_p.reshape(-1, 6)
            g = (pp[:, 0::2] - pp[:, 1::2]) / (2.0 * eps)      # (N,3)
            norms = np.sqrt(np.sum(g.astype(np.float64) ** 2, axis=1))
            mnorms = cfg.s * norms                 # metric-field gradient norm
            terms = (mnorms - 1.0) ** 2
            eik_mean = float(terms[eligible].mean())
            # d eik / d g, zeroed where ineligible or the norm vanishes
            safe = norms > GRAD_NORM_FLOOR
            scale = np.where(eligible & safe,
                             2.0 * cfg.s * (mnorms - 1.0)
                             / np.maximum(norms, GRAD_NORM_FLOOR),
                             0.0) / n_elig
            dg = scale[:, None] * g.astype(np.float64)
            dprobe = np.zeros((len(points), 6))
            dprobe[:, 0::2] = dg / (2.0 * eps)
            dprobe[:, 1::2] = -dg / (2.0 * eps)
            gphi_p = (cfg.lam * dprobe.reshape(-1)).astype(phi_p.dtype)
            ctx.backward(cache_p, gphi_p, grads)

    ctx.finalize(grads)
    total = sdf_mean + cfg.lam * eik_mean
    return total, sdf_mean, eik_mean, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """Adam moments per named parameter, with a two-stage learning rate."""

    def __init__(self, params, lr=0.01, lr_after=0.001, lr_decay_step=10000,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.lr_after = lr_after
        self.lr_decay_step = lr_decay_step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params}
        self.v = {name: np.zeros_like(a) for name, a in params}

    def lr_for_step(self, t):
        """Learning rate for 1-indexed step t; the decay step itself still
        uses the initial rate."""
        return self.lr if t <= self.lr_decay_step else self.lr_after

    def grow_like(self, params):
        """Zero-pad moment rows when per-corner parameter arrays grew."""
        for name, a in params:
            for buf in (self.m, self.v):
                old = buf[name]
                if old.shape != a.shape:
                    new = np.zeros_like(a)
                    new[: len(old)] = old
                    buf[name] = new

    def step(self, params, grads):
        """Apply one update; non-finite gradients abort without mutation."""
        bad = [name for name, g in grads if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingDiverged(f"non-finite gradients for {', '.join(bad)}")
        self.t += 1
        t = self.t
        lr = self.lr_for_step(t)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        grads = dict(grads)
        for name, p in params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 20000
    batch_size: int = 8192
    lr: float = 0.01
    lr_after: float = 0.001
    lr_decay_step: int = 10000

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0:
            raise ValueError("bad schedule")


def make_optimizer(state: MapState, schedule: TrainSchedule):
    return AdamState(state.param_items(), lr=schedule.lr,
                     lr_after=schedule.lr_after,
                     lr_decay_step=schedule.lr_decay_step)


def train_batch(state: MapState, points, labels, schedule: TrainSchedule,
                cfg: LossConfig, seed, opt: AdamState = None,
                hook=None, hook_every=0):
    """Uniform-batch training over a fixed sample set.

    Returns trace rows (iteration, sdf_loss, eikonal_loss, lr); the trace
    records the losses of the batch the step was computed from.
    """
    if len(points) == 0:
        raise DataError("empty dataset")
    opt = opt or make_optimizer(state, schedule)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    rows = []
    for it in range(1, schedule.iterations + 1):
        idx = rng.integers(0, len(points), size=schedule.batch_size)
        _, sdf_mean, eik_mean, grads = total_loss(state, points[idx], labels[idx], cfg)
        lr = opt.step(state.param_items(), state.grad_items(grads))
        rows.append((it, sdf_mean, eik_mean, lr))
        if hook is not None and hook_every and it % hook_every == 0:
            hook(it, state)
    return rows


def train_incremental(state: MapState, scans, cfg: LossConfig,
                      schedule: TrainSchedule, seed,
                      n_free=6, n_surface=3,
                      iterations_per_scan=300,
                      replay_capacity=1_000_000, old_fraction=0.5):
    """Scan-by-scan mapping with replayed past samples.

    Per scan: extend the octree (new corners get fresh random features and
    zero optimizer moments), sample the scan, then train on batches mixing
    replayed old samples with new ones at old_fraction. Returns
    (final state, trace rows).
    """
    if not scans:
        raise DataError("no scans")
    opt = make_optimizer(state, schedule)
    buf_pts = np.zeros((0, 3))
    buf_labels = np.zeros(0)
    rows = []
    it_global = 0
    for k, scan in enumerate(scans):
        grow_rng = np.random.default_rng(np.random.SeedSequence((seed, 2, k)))
        state = state.extended_with_points(scan.endpoints, grow_rng)
        opt.grow_like(state.param_items())
        new_pts, new_labels, _ = sample_scan(scan, k, n_free, n_surface, cfg.s, seed)
        if len(new_pts) == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence((seed, 4, k)))
        n_old = int(schedule.batch_size * old_fraction) if len(buf_pts) else 0
        n_new = schedule.batch_size - n_old
        for _ in range(iterations_per_scan):
            it_global += 1
            idx_new = rng.integers(0, len(new_pts), size=n_new)
            pts = new_pts[idx_new]
            labels = new_labels[idx_new]
            if n_old:
                idx_old = rng.integers(0, len(buf_pts), size=n_old)
                pts = np.concatenate([buf_pts[idx_old], pts])
                labels = np.concatenate([buf_labels[idx_old], labels])
            _, sdf_mean, eik_mean, grads = total_loss(state, pts, labels, cfg)
            lr = opt.step(state.param_items(), state.grad_items(grads))
            rows.append((it_global, sdf_mean, eik_mean, lr))
        buf_pts = np.concatenate([buf_pts, new_pts])
        buf_labels = np.concatenate([buf_labels, new_labels])
        if len(buf_pts) > replay_capacity:
            keep_rng = np.random.default_rng(np.random.SeedSequence((seed, 5, k)))
            keep = keep_rng.choice(len(buf_pts), size=replay_capacity, replace=False)
            keep.sort()
            buf_pts = buf_pts[keep]
            buf_labels = buf_labels[keep]
    return state, rows


# ---------------------------------------------------------------------------
# loss trace CSV
# ---------------------------------------------------------------------------


def save_loss_trace(path, rows, config_echo=None):
    with open(path, "w") as f:
        for key, value in (config_echo or {}).items():
            f.write(f"# {key}={value}\n")
        f.write("iteration,sdf_loss,eikonal_loss,lr\n")
        for it, sdf_mean, eik_mean, lr in rows:
            f.write(f"{it},{sdf_mean:.17g},{eik_mean:.17g},{lr:.17g}\n")


def load_loss_trace(path):
    """Returns (rows (N,4) float array, config echo dict)."""
    echo = {}
    data = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                echo[key.strip()] = value
            elif line and not line.startswith("iteration"):
                data.append([float(v) for v in line.split(",")])
    return np.array(data).reshape(-1, 4), echo


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
# Layout, all little-endian:
#   magic "DNMP" | u32 version | config block | 5 sections
# config block: u32 n_entries, then per entry u32 keylen, key bytes,
#   u32 valuelen, value bytes (UTF-8).
# Each section is u32 byte length + payload, in fixed order:
#   1 octree:    u32 height | f64 leaf | f64[3] origin |
#                per level: u64 n_voxels + u64[n] sorted voxel codes
#   2 indicators (bit-packed): u32 n_levels, per level u64 n_corners,
#                u32 bitwidth, packed rows (ceil(B/8) bytes each);
#                the indexing mode stores argmax code indices here
#   3 components f32: u32 kind (0 none, 1 component set, 2 codebook) + data
#   4 continuous f32: u32 n_levels, per level u64 n_rows, u32 dim, rows
#   5 decoder f32: u32 dim, u32 hidden, parameter arrays in fixed order


def _pack_section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _canonicalized(state: MapState) -> MapState:
    """Reorder per-corner rows into the slot order a fresh build assigns."""
    perms = state.tree.canonical_corner_permutation()
    if all(np.array_equal(p, np.arange(len(p))) for p in perms):
        return state

    def permute(rows, perm):
        out = np.empty_like(rows)
        out[perm] = rows
        return out

    ind = cont = base = cb = None
    if state.indicators is not None:
        ind = emb.IndicatorField(
            [permute(v, p) for v, p in zip(state.indicators.vectors, perms)])
    if state.cont is not None:
        cont = emb.ContinuousField(permute(state.cont.values, perms[0]))
    if state.baseline is not None:
        base = emb.BaselineContinuousField(
            [permute(v, p) for v, p in zip(state.baseline.levels, perms)])
    if state.codebook is not None:
        cb = emb.BaselineCodebook(
            state.codebook.codebook,
            [permute(v, p) for v, p in zip(state.codebook.logits, perms)])
    tree = build_octree_from_keys(state.tree.config,
                                  [state.tree.voxel_keys(l)
                                   for l in range(state.tree.height)])
    return MapState(tree, state.mode, state.decoder, indicators=ind,
                    comps=state.comps, cont=cont, baseline=base, codebook=cb,
                    implementation=state.implementation)


def build_octree_from_keys(config: OctreeConfig, level_keys):
    """Reconstruct a tree from per-level sorted voxel Morton codes."""
    from .octree import morton_decode

    leaf_coords = np.stack(morton_decode(np.asarray(level_keys[-1], dtype=np.uint64)),
                           axis=1)
    origin = config.origin_array
    leaf = config.edge_length(config.height - 1)
    centers = origin + (leaf_coords.astype(np.float64) + 0.5) * leaf
    tree = build_octree(centers, config)
    for level, keys in enumerate(level_keys):
        if not np.array_equal(tree.voxel_keys(level), np.asarray(keys, dtype=np.uint64)):
            raise FormatError(f"level {level} voxel set is not closed under parents")
    return tree


def save_checkpoint(state: MapState, path, config_echo=None):
    state = _canonicalized(state)
    report = state.storage()
    echo = {
        "mode": state.mode,
        "bitwidth": str(state.bitwidth),
        "dim": str(state.dim),
        "implementation": state.implementation,
        "height": str(state.tree.height),
        "leaf_voxel_size": repr(state.tree.config.leaf_voxel_size),
        "origin": " ".join(repr(v) for v in state.tree.config.origin),
        "rep_bytes": str(report.rep_bytes),
        "total_bytes": str(report.total_bytes),
    }
    echo.update({str(k): str(v) for k, v in (config_echo or {}).items()})

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(echo))
    for key, value in echo.items():
        kb = key.encode("utf-8")
        vb = value.encode("utf-8")
        blob += struct.pack("<I", len(kb)) + kb
        blob += struct.pack("<I", len(vb)) + vb

    # section 1: octree
    s = bytearray()
    s += struct.pack("<I", state.tree.height)
    s += struct.pack("<d", state.tree.config.leaf_voxel_size)
    s += np.asarray(state.tree.config.origin, dtype="<f8").tobytes()
    for level in range(state.tree.height):
        keys = state.tree.voxel_keys(level)
        s += struct.pack("<Q", len(keys))
        s += keys.astype("<u8").tobytes()
    blob += _pack_section(bytes(s))

    # section 2: packed indicator bits or code indices
    s = bytearray()
    if state.indicators is not None:
        s += struct.pack("<I", len(state.indicators.vectors))
        for v in state.indicators.vectors:
            bits = emb.ste_binarize(v).astype(np.uint8)
            s += struct.pack("<QI", len(v), v.shape[1])
            s += emb.pack_indicator_bits(bits).tobytes()
    elif state.codebook is not None:
        bitwidth = state.codebook.bitwidth
        s += struct.pack("<I", len(state.codebook.logits))
        for lg in state.codebook.logits:
            idx = np.argmax(lg, axis=1).astype(np.uint32)
            bits = ((idx[:, None] >> np.arange(bitwidth)[None, :]) & 1).astype(np.uint8)
            s += struct.pack("<QI", len(lg), bitwidth)
            s += emb.pack_indicator_bits(bits).tobytes()
    else:
        s += struct.pack("<I", 0)
    blob += _pack_section(bytes(s))

    # section 3: component set or codebook
    s = bytearray()
    if state.comps is not None:
        s += struct.pack("<I", 1)
        s += struct.pack("<II", state.comps.bitwidth, state.comps.dimension)
        s += state.comps.bias.astype("<f4").tobytes()
        s += state.comps.offsets_zero.astype("<f4").tobytes()
        s += state.comps.offsets_one.astype("<f4").tobytes()
    elif state.codebook is not None:
        s += struct.pack("<I", 2)
        s += struct.pack("<II", *state.codebook.codebook.shape)
        s += state.codebook.codebook.astype("<f4").tobytes()
    else:
        s += struct.pack("<I", 0)
    blob += _pack_section(bytes(s))

    # section 4: continuous embeddings
    s = bytearray()
    if state.cont is not None:
        s += struct.pack("<I", 1)
        s += struct.pack("<QI", *state.cont.values.shape)
        s += state.cont.values.astype("<f4").tobytes()
    elif state.baseline is not None:
        s += struct.pack("<I", len(state.baseline.levels))
        for v in state.baseline.levels:
            s += struct.pack("<QI", *v.shape)
            s += v.astype("<f4").tobytes()
    else:
        s += struct.pack("<I", 0)
    blob += _pack_section(bytes(s))

    # section 5: decoder
    s = bytearray()
    s += struct.pack("<II", state.decoder.dim, state.decoder.hidden)
    for _, arr in state.decoder.param_arrays():
        s += arr.astype("<f4").tobytes()
    blob += _pack_section(bytes(s))

    with open(path, "wb") as f:
        f.write(bytes(blob))
    return report


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off: self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def load_checkpoint(path):
    """Rebuild a MapState from a checkpoint file.

    Returns (state, config echo dict). Binarized indicators come back as
    synthetic values of the stored sign, so forward outputs match the
    saved map bit for bit while optimizer state is deliberately dropped.
    """
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (n_entries,) = r.unpack("<I")
    echo = {}
    for _ in range(n_entries):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        echo[key] = r.take(vlen).decode("utf-8")

    sections = []
    for _ in range(5):
        (length,) = r.unpack("<I")
        sections.append(_Reader(r.take(length), path))
    if r.off != len(blob):
        raise FormatError(f"{path}: trailing bytes after last section")

    mode = echo.get("mode")
    if mode not in emb.MODES:
        raise FormatError(f"{path}: unknown mode {mode!r} in header")

    # octree
    s = sections[0]
    (height,) = s.unpack("<I")
    (leaf,) = s.unpack("<d")
    origin = tuple(s.array("<f8", 3))
    level_keys = []
    for _ in range(height):
        (count,) = s.unpack("<Q")
        level_keys.append(s.array("<u8", count))
    config = OctreeConfig(height=height, leaf_voxel_size=leaf, origin=origin)
    tree = build_octree_from_keys(config, level_keys)

    # packed bits
    s = sections[1]
    (n_levels,) = s.unpack("<I")
    packed_levels = []
    bitwidth = 0
    for _ in range(n_levels):
        count, bitwidth = s.unpack("<QI")
        row_bytes = (bitwidth + 7) // 8
        packed = s.array("<u1", count * row_bytes).reshape(count, row_bytes)
        packed_levels.append(emb.unpack_indicator_bits(packed, bitwidth))

    # components / codebook
    s = sections[2]
    (kind,) = s.unpack("<I")
    comps = codebook_rows = None
    if kind == 1:
        cb_bits, dim = s.unpack("<II")
        comps = emb.ComponentVectorSet(
            s.array("<f4", dim),
            s.array("<f4", cb_bits * dim).reshape(cb_bits, dim),
            s.array("<f4", cb_bits * dim).reshape(cb_bits, dim),
        )
    elif kind == 2:
        size, dim = s.unpack("<II")
        codebook_rows = s.array("<f4", size * dim).reshape(size, dim)
    elif kind != 0:
        raise FormatError(f"{path}: unknown component-section kind {kind}")

    # continuous embeddings
    s = sections[3]
    (n_cont,) = s.unpack("<I")
    cont_levels = []
    for _ in range(n_cont):
        count, dim = s.unpack("<QI")
        cont_levels.append(s.array("<f4", count * dim).reshape(count, dim))

    # decoder
    s = sections[4]
    dim, hidden = s.unpack("<II")
    shapes = [(dim, hidden), (hidden,), (hidden, hidden), (hidden,),
              (hidden, 1), (1,)]
    arrays = [s.array("<f4", int(np.prod(sh))).reshape(sh) for sh in shapes]
    decoder = SdfDecoder(*arrays)

    indicators = cont = baseline = codebook = None
    if mode in ("decomposition", "decomposition_discrete_only"):
        if comps is None or len(packed_levels) != tree.height:
            raise FormatError(f"{path}: missing discrete sections for {mode}")
        indicators = emb.IndicatorField(
            [(bits.astype(np.float32) * 2.0 - 1.0) * 0.01 for bits in packed_levels])
        if mode == "decomposition":
            if len(cont_levels) != 1:
                raise FormatError(f"{path}: expected one continuous level")
            cont = emb.ContinuousField(cont_levels[0])
    elif mode == "continuous":
        if len(cont_levels) != tree.height:
            raise FormatError(f"{path}: expected one embedding table per level")
        baseline = emb.BaselineContinuousField(cont_levels)
    else:
        if codebook_rows is None or len(packed_levels) != tree.height:
            raise FormatError(f"{path}: missing indexing sections")
        logits = []
        for bits in packed_levels:
            idx = (bits.astype(np.uint32) << np.arange(bitwidth, dtype=np.uint32)).sum(
                axis=1)
            one_hot = np.zeros((len(bits), len(codebook_rows)), dtype=np.float32)
            if len(bits):
                one_hot[np.arange(len(bits)), idx] = 1.0
            logits.append(one_hot)
        codebook = emb.BaselineCodebook(codebook_rows, logits)

    state = MapState(tree, mode, decoder, indicators=indicators, comps=comps,
                     cont=cont, baseline=baseline, codebook=codebook,
                     implementation=echo.get("implementation", "efficient"))
    return state, echo
