"""Residual vector quantization with EMA-learned codebooks.

A stack of N codebooks quantizes encoder frames stage by stage: each stage
picks the nearest code to the running residual and the residual shrinks by
the chosen code.  Codebooks are initialized by k-means on the first batch
and then tracked online with exponential moving averages; codes that fall
out of use are reassigned to high-error batch vectors.

Distances are squared Euclidean throughout and argmin ties break toward the
lowest code index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, StateError

# Laplace guard for the EMA count denominator.
EMA_EPS = 1e-5

DEFAULT_DECAY = 0.99
DEFAULT_CODEBOOK_SIZE = 1024

# A code activated fewer than this many times in a batch counts as dead.
DEAD_CODE_THRESHOLD = 2

KMEANS_MAX_ITERS = 50
KMEANS_REL_TOL = 1e-4

CODEBOOK_MAGIC = b"FCQ1"

COMBINE_CONCAT = "concat"
COMBINE_ADD = "add"
COMBINE_RESIDUAL = "residual"
COMBINE_MODES = (COMBINE_CONCAT, COMBINE_ADD, COMBINE_RESIDUAL)


def _as_frames(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"expected an (M, D) frame matrix, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise InvalidInputError(f"expected dimension {dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("frame matrix contains non-finite values")
    return x


def squared_distances(queries: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (M, K)."""
    q_sq = np.sum(queries ** 2, axis=1, keepdims=True)
    c_sq = np.sum(codes ** 2, axis=1)
    return q_sq + c_sq - 2.0 * queries @ codes.T


@dataclass
class Codebook:
    """One VQ stage: K code vectors plus their EMA statistics.

    Invariant once initialized: ``vectors[k]`` equals
    ``ema_embed_sum[k] / max(ema_cluster_size[k], EMA_EPS)``.
    """

    vectors: np.ndarray
    ema_cluster_size: np.ndarray
    ema_embed_sum: np.ndarray
    decay: float = DEFAULT_DECAY
    initialized: bool = False

    @classmethod
    def empty(cls, num_codes: int, dim: int, decay: float = DEFAULT_DECAY) -> "Codebook":
        if num_codes < 1 or dim < 1:
            raise InvalidInputError(f"need at least one code and one dimension, got K={num_codes} D={dim}")
        if not 0.0 < decay < 1.0:
            raise InvalidInputError(f"decay must be in (0, 1), got {decay}")
        return cls(
            vectors=np.zeros((num_codes, dim)),
            ema_cluster_size=np.zeros(num_codes),
            ema_embed_sum=np.zeros((num_codes, dim)),
            decay=decay,
        )

    @property
    def num_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def assign(self, frames: np.ndarray) -> np.ndarray:
        """Nearest-code index for each row of an (M, D) matrix."""
        if not self.initialized:
            raise StateError("codebook used before initialization")
        frames = _as_frames(frames, self.dim)
        return np.argmin(squared_distances(frames, self.vectors), axis=1)

    def _refresh_vectors(self) -> None:
        denom = np.maximum(self.ema_cluster_size, EMA_EPS)
        self.vectors = self.ema_embed_sum / denom[:, None]


def nearest_code(codebook: Codebook, vector: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest code to one query vector (ties -> lowest index).

    Returns the code index and a copy of its vector.
    """
    vector = np.asarray(vector, dtype=np.float64).reshape(1, -1)
    index = int(codebook.assign(vector)[0])
    return index, codebook.vectors[index].copy()


def _kmeans_pp_seed(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding, greedy variant: every seed after the first is
    the best of a handful of weighted candidates, judged by the inertia it
    would leave.  A single draw per seed is prone to doubling up on an
    already-covered cluster when many tight clusters compete."""
    n_candidates = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(len(frames))]
    closest = np.sum((frames - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[i] = frames[rng.integers(len(frames))]
            continue
        picks = rng.choice(len(frames), size=n_candidates, p=closest / total)
        trial = np.minimum(closest[None, :], squared_distances(frames, frames[picks]).T)
        centers[i] = frames[picks[np.argmin(trial.sum(axis=1))]]
        closest = np.minimum(closest, np.sum((frames - centers[i]) ** 2, axis=1))
    return centers


def kmeans(frames: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = KMEANS_MAX_ITERS,
           rel_tol: float = KMEANS_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` rounds or when the relative centroid shift
    drops below ``rel_tol``.  Emptied clusters are reseeded to the point
    farthest from its current centroid.  Returns (centroids, assignments).
    """
    frames = _as_frames(frames)
    if k > len(frames):
        raise InvalidInputError(f"cannot fit {k} clusters to {len(frames)} frames")
    centers = _kmeans_pp_seed(frames, k, rng)
    assignments = np.zeros(len(frames), dtype=np.int64)
    scale = np.sqrt(np.mean(frames ** 2)) + 1e-12
    for _ in range(max_iters):
        assignments = np.argmin(squared_distances(frames, centers), axis=1)
        new_centers = centers.copy()
        counts = np.bincount(assignments, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assignments, frames)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for dead in np.flatnonzero(~nonempty):
            errors = np.sum((frames - new_centers[assignments]) ** 2, axis=1)
            new_centers[dead] = frames[np.argmax(errors)]
            assignments = np.argmin(squared_distances(frames, new_centers), axis=1)
        shift = np.sqrt(np.mean((new_centers - centers) ** 2))
        centers = new_centers
        if shift / scale < rel_tol:
            break
    assignments = np.argmin(squared_distances(frames, centers), axis=1)
    return centers, assignments


def kmeans_init(batch: np.ndarray, num_codes: int,
                decay: float = DEFAULT_DECAY,
                rng: np.random.Generator | None = None) -> Codebook:
    """Codebook seeded by clustering one batch.

    Vectors are the final cluster means and the EMA state starts from the
    final cluster sizes and sums, so the codebook invariant holds exactly.
    """
    batch = _as_frames(batch)
    if len(batch) < num_codes:
        raise InvalidInputError(
            f"initialization batch of {len(batch)} frames is smaller than K={num_codes}"
        )
    rng = rng if rng is not None else np.random.default_rng()
    _, assignments = kmeans(batch, num_codes, rng)
    counts = np.bincount(assignments, minlength=num_codes).astype(np.float64)
    sums = np.zeros((num_codes, batch.shape[1]))
    np.add.at(sums, assignments, batch)
    cb = Codebook(
        vectors=sums / np.maximum(counts, EMA_EPS)[:, None],
        ema_cluster_size=counts,
        ema_embed_sum=sums,
        decay=decay,
        initialized=True,
    )
    return cb


def ema_update(codebook: Codebook, batch: np.ndarray, assignments: np.ndarray) -> Codebook:
    """One EMA step from a batch and its code assignments.

    size_k   <- decay * size_k + (1 - decay) * count_k
    sum_k    <- decay * sum_k  + (1 - decay) * batch_sum_k
    vector_k <- sum_k / max(size_k, EMA_EPS)

    Codes absent from the batch decay toward zero mass but keep their
    position, since numerator and denominator shrink together.
    """
    if not codebook.initialized:
        raise StateError("EMA update on an uninitialized codebook")
    batch = _as_frames(batch, codebook.dim)
    assignments = np.asarray(assignments)
    if assignments.shape != (len(batch),):
        raise InvalidInputError(
            f"assignments shape {assignments.shape} does not match batch of {len(batch)}"
        )
    if len(batch) and (assignments.min() < 0 or assignments.max() >= codebook.num_codes):
        raise InvalidInputError("assignment index out of range")
    counts = np.bincount(assignments, minlength=codebook.num_codes).astype(np.float64)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, assignments, batch)
    d = codebook.decay
    codebook.ema_cluster_size = d * codebook.ema_cluster_size + (1.0 - d) * counts
    codebook.ema_embed_sum = d * codebook.ema_embed_sum + (1.0 - d) * sums
    codebook._refresh_vectors()
    return codebook


@dataclass
class ActivationStats:
    """Per-code activation counts for one batch, plus a lifetime tally."""

    batch_counts: np.ndarray
    lifetime_counts: np.ndarray

    @classmethod
    def from_assignments(cls, assignments: np.ndarray, num_codes: int) -> "ActivationStats":
        counts = np.bincount(np.asarray(assignments), minlength=num_codes)
        return cls(batch_counts=counts, lifetime_counts=counts.copy())

    def accumulate(self, assignments: np.ndarray) -> "ActivationStats":
        counts = np.bincount(np.asarray(assignments), minlength=len(self.batch_counts))
        self.batch_counts = counts
        self.lifetime_counts = self.lifetime_counts + counts
        return self

    def utilization(self) -> float:
        """Fraction of codes activated at least once in the latest batch."""
        return float(np.mean(self.batch_counts > 0))


def reassign_dead_codes(codebook: Codebook, stats: ActivationStats, batch: np.ndarray,
                        rng: np.random.Generator | None = None) -> tuple[Codebook, int]:
    """Move under-used codes onto hard batch vectors.

    A code with fewer than DEAD_CODE_THRESHOLD activations in the batch is
    replaced by a batch vector drawn with probability proportional to its
    squared quantization error, and its EMA state restarts at (count 1,
    vector).  Returns the codebook and how many codes moved.
    """
    if not codebook.initialized:
        raise StateError("reassignment on an uninitialized codebook")
    batch = _as_frames(batch, codebook.dim)
    if len(batch) == 0:
        raise InvalidInputError("cannot reassign from an empty batch")
    dead = np.flatnonzero(stats.batch_counts < DEAD_CODE_THRESHOLD)
    if len(dead) == 0:
        return codebook, 0
    rng = rng if rng is not None else np.random.default_rng()
    # the expansion form can dip a hair below zero; a perfectly quantized
    # batch degrades to uniform sampling
    errors = np.maximum(np.min(squared_distances(batch, codebook.vectors), axis=1), 0.0)
    total = errors.sum()
    probs = errors / total if total > 0.0 else None
    supply = len(batch) if probs is None else int(np.count_nonzero(probs))
    replace = len(dead) > supply
    chosen = rng.choice(len(batch), size=len(dead), replace=replace, p=probs)
    codebook.vectors[dead] = batch[chosen]
    codebook.ema_cluster_size[dead] = 1.0
    codebook.ema_embed_sum[dead] = batch[chosen]
    return codebook, len(dead)


@dataclass
class TokenMatrix:
    """Code indices per quantizer stage, shape (n_active, T)."""

    indices: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        if indices.ndim != 2:
            raise InvalidInputError(f"expected (n_q, T) indices, got shape {indices.shape}")
        if indices.size and indices.min() < 0:
            raise InvalidInputError("token indices must be non-negative")
        self.indices = indices

    @property
    def num_stages(self) -> int:
        return self.indices.shape[0]

    @property
    def num_frames(self) -> int:
        return self.indices.shape[1]

    def prefix(self, n_stages: int) -> "TokenMatrix":
        if not 1 <= n_stages <= self.num_stages:
            raise InvalidInputError(
                f"prefix of {n_stages} stages not available from {self.num_stages}"
            )
        return TokenMatrix(self.indices[:n_stages].copy())


@dataclass
class QuantizerStack:
    """An ordered list of residual VQ stages sharing one dimension."""

    codebooks: list[Codebook] = field(default_factory=list)

    @classmethod
    def empty(cls, num_quantizers: int, num_codes: int, dim: int,
              decay: float = DEFAULT_DECAY) -> "QuantizerStack":
        if num_quantizers < 1:
            raise InvalidInputError(f"need at least one quantizer, got {num_quantizers}")
        return cls([Codebook.empty(num_codes, dim, decay) for _ in range(num_quantizers)])

    def __post_init__(self):
        if self.codebooks:
            dims = {cb.dim for cb in self.codebooks}
            if len(dims) != 1:
                raise InvalidInputError(f"codebook dimensions disagree: {sorted(dims)}")

    @property
    def num_quantizers(self) -> int:
        return len(self.codebooks)

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @property
    def initialized(self) -> bool:
        return all(cb.initialized for cb in self.codebooks)

    def _check_ready(self, n_active: int | None) -> int:
        if not self.codebooks:
            raise StateError("empty quantizer stack")
        n = self.num_quantizers if n_active is None else n_active
        if not 1 <= n <= self.num_quantizers:
            raise InvalidInputError(
                f"n_active {n} outside 1..{self.num_quantizers}"
            )
        if not all(cb.initialized for cb in self.codebooks[:n]):
            raise StateError("quantizer stack used before codebook initialization")
        return n

    def rvq_encode(self, frames: np.ndarray, n_active: int | None = None
                   ) -> tuple[TokenMatrix, np.ndarray, np.ndarray]:
        """Quantize (T, D) frames through the first ``n_active`` stages.

        Returns (tokens, quantized, residual); ``quantized`` is the sum of
        the per-stage code vectors and ``residual = frames - quantized``
        exactly.  Tokens for a smaller ``n_active`` are a prefix of the
        tokens for a larger one.
        """
        n = self._check_ready(n_active)
        frames = _as_frames(frames, self.dim)
        residual = frames.copy()
        quantized = np.zeros_like(frames)
        rows = np.empty((n, len(frames)), dtype=np.int64)
        for i, cb in enumerate(self.codebooks[:n]):
            rows[i] = cb.assign(residual)
            step = cb.vectors[rows[i]]
            quantized += step
            residual -= step
        return TokenMatrix(rows), quantized, residual

    def rvq_decode(self, tokens: TokenMatrix) -> np.ndarray:
        """Sum the addressed code vectors stage by stage, shape (T, D)."""
        n = self._check_ready(tokens.num_stages)
        out = np.zeros((tokens.num_frames, self.dim))
        for i in range(n):
            cb = self.codebooks[i]
            row = tokens.indices[i]
            if row.size and row.max() >= cb.num_codes:
                raise InvalidInputError(
                    f"token index {row.max()} out of range for stage {i} (K={cb.num_codes})"
                )
            out += cb.vectors[row]
        return out

    def init_from_batch(self, batch: np.ndarray, rng: np.random.Generator) -> None:
        """Sequential k-means: each stage clusters the residual left by the
        stages before it."""
        residual = _as_frames(batch).copy()
        for i, cb in enumerate(self.codebooks):
            seeded = kmeans_init(residual, cb.num_codes, cb.decay, rng)
            cb.vectors = seeded.vectors
            cb.ema_cluster_size = seeded.ema_cluster_size
            cb.ema_embed_sum = seeded.ema_embed_sum
            cb.initialized = True
            residual -= cb.vectors[cb.assign(residual)]

    def serialize(self) -> bytes:
        return serialize_stack(self)


def sample_quantizer_dropout(num_quantizers: int, rng: np.random.Generator) -> int:
    """Uniform draw of how many stages to keep, from {1, ..., N}."""
    if num_quantizers < 1:
        raise InvalidInputError(f"need at least one quantizer, got {num_quantizers}")
    return int(rng.integers(1, num_quantizers + 1))


def semantic_combine(mode: str, acoustic: np.ndarray, semantic: np.ndarray,
                     stack: QuantizerStack, n_active: int | None = None
                     ) -> tuple[np.ndarray, TokenMatrix]:
    """Blend quantized acoustic frames with aligned semantic frames.

    concat:   [RVQ(V_a) ; V_s] along the feature axis (width D + D_s)
    add:      RVQ(V_a) + V_s
    residual: RVQ(V_a - V_s) + V_s

    ``semantic`` must have one row per acoustic frame; for add/residual its
    width must match the acoustic width.  Returns the combined frames and
    the tokens of whichever matrix was quantized.
    """
    if mode not in COMBINE_MODES:
        raise InvalidInputError(f"unknown combine mode {mode!r}")
    acoustic = _as_frames(acoustic)
    semantic = _as_frames(semantic)
    if semantic.shape[0] != acoustic.shape[0]:
        raise InvalidInputError(
            f"semantic rows {semantic.shape[0]} do not align with acoustic rows {acoustic.shape[0]}"
        )
    if mode != COMBINE_CONCAT and semantic.shape[1] != acoustic.shape[1]:
        raise InvalidInputError(
            f"mode {mode!r} needs matching widths, got {acoustic.shape[1]} and {semantic.shape[1]}"
        )
    if mode == COMBINE_RESIDUAL:
        tokens, quantized, _ = stack.rvq_encode(acoustic - semantic, n_active)
        return quantized + semantic, tokens
    tokens, quantized, _ = stack.rvq_encode(acoustic, n_active)
    if mode == COMBINE_ADD:
        return quantized + semantic, tokens
    return np.concatenate([quantized, semantic], axis=1), tokens


@dataclass
class FitReport:
    """Summary of one fitting run."""

    batches_processed: int
    utilization: list[float]
    residual_mse: list[float]
    reassigned: list[int]

    def to_dict(self) -> dict:
        return {
            "batches_processed": self.batches_processed,
            "utilization": self.utilization,
            "residual_mse": self.residual_mse,
            "reassigned": self.reassigned,
        }


def fit_stack(stack: QuantizerStack, batches, rng: np.random.Generator,
              reassign: bool = True) -> FitReport:
    """Drive codebook learning over an iterable of (M, D) batches.

    The first batch initializes every stage by sequential k-means.  Each
    later batch runs, stage by stage: assign on the running residual,
    quantize with the pre-update codebook, EMA update, then dead-code
    reassignment.  Reports per-stage utilization and residual MSE measured
    on the final batch.
    """
    stats = [ActivationStats(np.zeros(cb.num_codes, dtype=np.int64),
                             np.zeros(cb.num_codes, dtype=np.int64))
             for cb in stack.codebooks]
    processed = 0
    utilization = [0.0] * stack.num_quantizers
    residual_mse = [float("nan")] * stack.num_quantizers
    reassigned = [0] * stack.num_quantizers
    for batch in batches:
        batch = _as_frames(batch, stack.dim if stack.codebooks else None)
        if not stack.initialized:
            stack.init_from_batch(batch, rng)
            processed += 1
            residual = batch.copy()
            for i, cb in enumerate(stack.codebooks):
                assignments = cb.assign(residual)
                stats[i].accumulate(assignments)
                residual -= cb.vectors[assignments]
                utilization[i] = stats[i].utilization()
                residual_mse[i] = float(np.mean(residual ** 2))
            continue
        residual = batch.copy()
        for i, cb in enumerate(stack.codebooks):
            assignments = cb.assign(residual)
            step = cb.vectors[assignments]
            ema_update(cb, residual, assignments)
            stats[i].accumulate(assignments)
            if reassign:
                _, moved = reassign_dead_codes(cb, stats[i], residual, rng)
                reassigned[i] += moved
            residual = residual - step
            utilization[i] = stats[i].utilization()
            residual_mse[i] = float(np.mean(residual ** 2))
        processed += 1
    if processed == 0:
        raise InvalidInputError("fit received no batches")
    return FitReport(processed, utilization, residual_mse, reassigned)


def serialize_stack(stack: QuantizerStack) -> bytes:
    """Codebook blob: magic, K, D, N, decay, then per stage the code
    vectors followed by the EMA sizes and sums, all little-endian float32.
    """
    if not stack.codebooks:
        raise StateError("cannot serialize an empty stack")
    if not stack.initialized:
        raise StateError("cannot serialize an uninitialized stack")
    sizes = {(cb.num_codes, cb.dim, cb.decay) for cb in stack.codebooks}
    if len(sizes) != 1:
        raise InvalidInputError("stack stages disagree on K, D, or decay")
    k, d, decay = sizes.pop()
    out = bytearray()
    out += CODEBOOK_MAGIC
    out += struct.pack("<IIIf", k, d, stack.num_quantizers, decay)
    for cb in stack.codebooks:
        out += cb.vectors.astype("<f4").tobytes()
        out += cb.ema_cluster_size.astype("<f4").tobytes()
        out += cb.ema_embed_sum.astype("<f4").tobytes()
    return bytes(out)


def deserialize_stack(blob: bytes) -> QuantizerStack:
    """Inverse of :func:`serialize_stack` (float32 precision)."""
    header = struct.calcsize("<IIIf")
    if len(blob) < 4 + header:
        raise InvalidInputError("codebook blob too short")
    if blob[:4] != CODEBOOK_MAGIC:
        raise InvalidInputError(f"bad codebook magic {blob[:4]!r}")
    k, d, n, decay = struct.unpack_from("<IIIf", blob, 4)
    if k < 1 or d < 1 or n < 1:
        raise InvalidInputError(f"invalid codebook geometry K={k} D={d} N={n}")
    per_stage = (k * d + k + k * d) * 4
    expected = 4 + header + n * per_stage
    if len(blob) != expected:
        raise InvalidInputError(
            f"codebook blob is {len(blob)} bytes, expected {expected}"
        )
    offset = 4 + header
    books = []
    for _ in range(n):
        vectors = np.frombuffer(blob, dtype="<f4", count=k * d, offset=offset)
        offset += k * d * 4
        sizes = np.frombuffer(blob, dtype="<f4", count=k, offset=offset)
        offset += k * 4
        sums = np.frombuffer(blob, dtype="<f4", count=k * d, offset=offset)
        offset += k * d * 4
        books.append(Codebook(
            vectors=vectors.astype(np.float64).reshape(k, d),
            ema_cluster_size=sizes.astype(np.float64),
            ema_embed_sum=sums.astype(np.float64).reshape(k, d),
            decay=float(decay),
            initialized=True,
        ))
    return QuantizerStack(books)
