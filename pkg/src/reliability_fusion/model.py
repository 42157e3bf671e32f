"""Late-fusion multimodal scorer: linear per-modality encoders and softmax item weights."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"MRGC"
CHECKPOINT_VERSION = 1
DEFAULT_EMBED_DIM = 64

STAGE_I, STAGE_II = "I", "II"


@dataclass
class ModelParams:
    """Trainable state.

    ``user_emb[m]`` is (users, d), ``proj[m]`` is (d, d_m), ``bias[m]`` is (d,)
    and ``logits`` is (items, M). The logits are excluded from the norm
    regularizer.
    """
    user_emb: list
    proj: list
    bias: list
    logits: np.ndarray

    @property
    def n_modalities(self) -> int:
        return len(self.user_emb)

    @property
    def embed_dim(self) -> int:
        return self.user_emb[0].shape[1]

    @property
    def user_count(self) -> int:
        return self.user_emb[0].shape[0]

    @property
    def item_count(self) -> int:
        return self.logits.shape[0]

    @property
    def modality_dims(self) -> list:
        return [p.shape[1] for p in self.proj]

    def theta(self) -> list:
        """Backbone arrays, in canonical order."""
        out = []
        for m in range(self.n_modalities):
            out += [self.user_emb[m], self.proj[m], self.bias[m]]
        return out

    def arrays(self) -> list:
        return self.theta() + [self.logits]

    def copy(self) -> "ModelParams":
        return ModelParams([a.copy() for a in self.user_emb], [a.copy() for a in self.proj],
                           [a.copy() for a in self.bias], self.logits.copy())

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(a) for a in self.user_emb], [np.zeros_like(a) for a in self.proj],
                           [np.zeros_like(a) for a in self.bias], np.zeros_like(self.logits))

    def theta_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.theta())))

    def equals(self, other: "ModelParams") -> bool:
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(user_count, item_count, n_modalities, embed_dim, modality_dims, seed=0, std=0.01) -> ModelParams:
    if min(user_count, item_count, n_modalities, embed_dim) < 1 or len(modality_dims) != n_modalities:
        raise ValueError("dimensions must be positive and match the modality count")
    rng = np.random.default_rng(seed)
    user_emb, proj, bias = [], [], []
    for m in range(n_modalities):
        user_emb.append(rng.normal(0.0, std, (user_count, embed_dim)))
        proj.append(rng.normal(0.0, std, (embed_dim, modality_dims[m])))
        bias.append(np.zeros(embed_dim))
    logits = rng.normal(0.0, std, (item_count, n_modalities))
    return ModelParams(user_emb, proj, bias, logits)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _features(features, m):
    f = features[m]
    return getattr(f, "matrix", f)


def encode(params: ModelParams, u: int, i: int, m: int, features):
    """Per-modality (user, item) embeddings; the item side is a linear projection of its features."""
    if not 0 <= u < params.user_count or not 0 <= i < params.item_count or not 0 <= m < params.n_modalities:
        raise IndexError(f"index out of range: u={u}, i={i}, m={m}")
    f = _features(features, m)[i]
    return params.user_emb[m][u], params.proj[m] @ f + params.bias[m]


def item_embeddings(params: ModelParams, features, m: int, items=None) -> np.ndarray:
    f = _features(features, m)
    if items is not None:
        f = f[items]
    return f @ params.proj[m].T + params.bias[m]


def modality_rating(e_u, e_i) -> float:
    e_u, e_i = np.asarray(e_u), np.asarray(e_i)
    if e_u.shape != e_i.shape:
        raise ValueError(f"embedding length mismatch: {e_u.shape} vs {e_i.shape}")
    return float(np.dot(e_u, e_i))


def modality_weights(params: ModelParams, i=None) -> np.ndarray:
    """Softmax of the weight logits for item ``i`` (or all items)."""
    return softmax(params.logits if i is None else params.logits[i])


def fuse_weighted(weights, ratings):
    weights, ratings = np.asarray(weights), np.asarray(ratings)
    if weights.shape[-1] != ratings.shape[-1]:
        raise ValueError("weights and ratings differ in length")
    return np.sum(weights * ratings, axis=-1)


def fuse_uniform(ratings):
    # stage I fuses by plain sum, not mean
    return np.sum(np.asarray(ratings), axis=-1)


@dataclass
class TripletScores:
    """Batched scores for triplets; modality axis last."""
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    stage: str
    pos_modal: np.ndarray  # (B, M)
    neg_modal: np.ndarray
    pos_weights: np.ndarray  # (B, M), ones in stage I
    neg_weights: np.ndarray
    pos_score: np.ndarray  # (B,)
    neg_score: np.ndarray
    e_user: list = field(repr=False, default_factory=list)  # per modality (B, d)
    e_pos: list = field(repr=False, default_factory=list)
    e_neg: list = field(repr=False, default_factory=list)


def score_triplets(params: ModelParams, features, triplets, stage=STAGE_II) -> TripletScores:
    triplets = np.atleast_2d(np.asarray(triplets, dtype=np.int64))
    u, i, k = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    e_user, e_pos, e_neg, ym_i, ym_k = [], [], [], [], []
    for m in range(params.n_modalities):
        eu = params.user_emb[m][u]
        ei = item_embeddings(params, features, m, i)
        ek = item_embeddings(params, features, m, k)
        e_user.append(eu)
        e_pos.append(ei)
        e_neg.append(ek)
        ym_i.append(np.einsum("bd,bd->b", eu, ei))
        ym_k.append(np.einsum("bd,bd->b", eu, ek))
    ym_i = np.stack(ym_i, axis=1)
    ym_k = np.stack(ym_k, axis=1)
    if stage == STAGE_I:
        wi = np.ones_like(ym_i)
        wk = np.ones_like(ym_k)
        yi, yk = fuse_uniform(ym_i), fuse_uniform(ym_k)
    elif stage == STAGE_II:
        wi, wk = modality_weights(params, i), modality_weights(params, k)
        yi, yk = fuse_weighted(wi, ym_i), fuse_weighted(wk, ym_k)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return TripletScores(u, i, k, stage, ym_i, ym_k, wi, wk, yi, yk, e_user, e_pos, e_neg)


def score_triplet(params, features, triplet, stage=STAGE_II) -> TripletScores:
    return score_triplets(params, features, [triplet], stage)


def modality_score_matrix(params: ModelParams, features, users) -> np.ndarray:
    """(len(users), items, M) modality-specific ratings."""
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), params.item_count, params.n_modalities))
    for m in range(params.n_modalities):
        out[:, :, m] = params.user_emb[m][users] @ item_embeddings(params, features, m).T
    return out


def score_users(params: ModelParams, features, users, stage=STAGE_II) -> np.ndarray:
    ym = modality_score_matrix(params, features, users)
    if stage == STAGE_I:
        return fuse_uniform(ym)
    return fuse_weighted(modality_weights(params)[None, :, :], ym)


def score_all_items(params, features, u, stage=STAGE_II) -> np.ndarray:
    return score_users(params, features, [u], stage)[0]


def save_checkpoint(path, params: ModelParams):
    header = struct.pack("<4sIIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.user_count,
                         params.item_count, params.n_modalities, params.embed_dim)
    header += struct.pack(f"<{params.n_modalities}I", *params.modality_dims)
    with open(path, "wb") as fh:
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, n_u, n_i, n_m, d = struct.unpack_from("<4sIIIII", buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 24
    dims = struct.unpack_from(f"<{n_m}I", buf, offset)
    offset += 4 * n_m

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        return a

    user_emb, proj, bias = [], [], []
    for m in range(n_m):
        user_emb.append(take((n_u, d)))
        proj.append(take((d, dims[m])))
        bias.append(take((d,)))
    logits = take((n_i, n_m))
    if offset != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(user_emb, proj, bias, logits)
