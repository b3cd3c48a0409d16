"""Disentangling network: decomposers, fusion, embedding heads and branch scores."""

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError, ShapeError

BRANCHES = ("p", "a", "o", "cp")
CHECKPOINT_MAGIC = b"PBCK"
CHECKPOINT_VERSION = 1


def sentinel(dtype=None):
    """Most negative finite value; stands in for -inf on masked pairs."""
    return float(np.finfo(dtype or ad.get_dtype()).min)


@dataclass
class ModelConfig:
    feat_dim: int
    num_attrs: int
    num_objs: int
    word_dim: int = 300
    hidden: int = 0  # 0 -> feat_dim
    embed_dim: int = 0  # 0 -> feat_dim
    dropout: float = 0.1
    freeze_words: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.hidden:
            self.hidden = self.feat_dim
        if not self.embed_dim:
            self.embed_dim = self.feat_dim


@dataclass
class BranchScores:
    s_p: np.ndarray
    s_a: np.ndarray
    s_o: np.ndarray
    s_cp: np.ndarray


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Model:
    """All trainable weights, stored as plain arrays keyed by name.

    Forward computation happens on a :class:`Net`, obtained with
    :meth:`bind`, which wraps every parameter as a leaf of one graph.
    """

    def __init__(self, config, attr_words=None, obj_words=None):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        D, H, E, W = c.feat_dim, c.hidden, c.embed_dim, c.word_dim
        params = {}

        def linear(name, fan_in, fan_out):
            params[f"{name}.w"] = _xavier(rng, fan_in, fan_out)
            params[f"{name}.b"] = np.zeros(fan_out)

        def mlp(name, fan_in):
            linear(f"{name}.fc1", fan_in, H)
            params[f"{name}.ln.g"] = np.ones(H)
            params[f"{name}.ln.b"] = np.zeros(H)
            linear(f"{name}.fc2", H, D)

        mlp("dec_a", D)
        mlp("dec_o", D)
        mlp("fuse", 2 * D)
        for branch in ("p", "a", "o", "cp"):
            linear(f"vis_{branch}", D, E)
        linear("txt_a", W, E)
        linear("txt_o", W, E)
        linear("txt_p", 2 * W, E)
        linear("txt_cp", 2 * W, E)
        if attr_words is None:
            attr_words = rng.standard_normal((c.num_attrs, W))
        if obj_words is None:
            obj_words = rng.standard_normal((c.num_objs, W))
        attr_words = np.asarray(attr_words)
        obj_words = np.asarray(obj_words)
        if attr_words.shape != (c.num_attrs, W) or obj_words.shape != (c.num_objs, W):
            raise ShapeError(
                "word_tables",
                f"expected ({c.num_attrs}, {W}) and ({c.num_objs}, {W}), "
                f"got {attr_words.shape} and {obj_words.shape}",
            )
        params["words.attr"] = attr_words
        params["words.obj"] = obj_words
        dtype = ad.get_dtype()
        self.params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}

    @classmethod
    def from_embeddings(cls, config, vocab, table):
        return cls(config, table.matrix(vocab.attributes), table.matrix(vocab.objects))

    def trainable(self, name):
        return not (self.config.freeze_words and name.startswith("words."))

    def bind(self, graph, train=False, rng=None, requires_grad=True):
        return Net(self, graph, train=train, rng=rng, requires_grad=requires_grad)

    def state_bytes(self):
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


class Net:
    """A model bound to one graph."""

    def __init__(self, model, graph, train=False, rng=None, requires_grad=True):
        self.model = model
        self.config = model.config
        self.graph = graph
        self.train = train
        self.rng = rng
        if train and model.config.dropout > 0 and rng is None:
            raise ContractError("training-mode forward needs an rng for dropout")
        self.p = {
            name: graph.leaf(value, requires_grad=requires_grad and model.trainable(name), kind=name)
            for name, value in model.params.items()
        }

    def input(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.config.feat_dim:
            raise ShapeError("input", f"expected feature dim {self.config.feat_dim}, got {x.shape[-1]}")
        return self.graph.constant(x)

    def linear(self, name, x):
        return ad.add(ad.matmul(x, self.p[f"{name}.w"]), self.p[f"{name}.b"])

    def mlp(self, name, x):
        h = self.linear(f"{name}.fc1", x)
        h = ad.layer_norm(h, self.p[f"{name}.ln.g"], self.p[f"{name}.ln.b"])
        h = ad.relu(h)
        h = ad.dropout(h, self.config.dropout, self.rng, self.train)
        return self.linear(f"{name}.fc2", h)

    def _check_feat(self, x):
        if x.shape[-1] != self.config.feat_dim:
            raise ShapeError("decompose", f"expected feature dim {self.config.feat_dim}, got {x.shape[-1]}")

    def decompose_attr(self, f_cls):
        self._check_feat(f_cls)
        return self.mlp("dec_a", f_cls)

    def decompose_obj(self, f_cls):
        self._check_feat(f_cls)
        return self.mlp("dec_o", f_cls)

    def decompose(self, f_cls):
        return self.decompose_attr(f_cls), self.decompose_obj(f_cls)

    def fuse(self, f_a, f_o):
        if f_a.shape != f_o.shape or f_a.shape[-1] != self.config.feat_dim:
            raise ShapeError("fuse", f"primitive shapes {f_a.shape} and {f_o.shape}")
        return self.mlp("fuse", ad.concat((f_a, f_o), axis=-1))

    def embed_visual(self, branch, x):
        return ad.relu(self.linear(f"vis_{branch}", x))

    def attr_text(self):
        return ad.relu(self.linear("txt_a", self.p["words.attr"]))

    def obj_text(self):
        return ad.relu(self.linear("txt_o", self.p["words.obj"]))

    def pair_words(self, pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return compose_word(
            ad.gather_rows(self.p["words.attr"], pairs[:, 0]),
            ad.gather_rows(self.p["words.obj"], pairs[:, 1]),
        )

    def pair_text(self, branch, pairs):
        if branch not in ("p", "cp"):
            raise ContractError(f"pair text exists for branches p and cp, not {branch!r}")
        return ad.relu(self.linear(f"txt_{branch}", self.pair_words(pairs)))

    def text(self, pairs):
        """Text-side embeddings for every branch over the given pair list."""
        return {
            "p": self.pair_text("p", pairs),
            "a": self.attr_text(),
            "o": self.obj_text(),
            "cp": self.pair_text("cp", pairs),
        }

    def score(self, branch, visual, text, inv_tau):
        """Temperature-scaled cosine between embedded visual rows and text rows."""
        return ad.scale(ad.cosine_matrix(self.embed_visual(branch, visual), text), inv_tau)


def compose_word(w_a, w_o):
    """Pair word vector: attribute embedding followed by object embedding."""
    return ad.concat((w_a, w_o), axis=-1)


def forward_scores(net, f_cls, pairs, inv_tau, text=None):
    """Clean forward: primitives, composed feature and all four branch logits."""
    if inv_tau <= 0:
        raise ContractError("1/tau must be positive")
    x = f_cls if isinstance(f_cls, ad.Node) else net.input(f_cls)
    text = text or net.text(pairs)
    f_a, f_o = net.decompose(x)
    f_cp = net.fuse(f_a, f_o)
    scores = {
        "p": net.score("p", x, text["p"], inv_tau),
        "a": net.score("a", f_a, text["a"], inv_tau),
        "o": net.score("o", f_o, text["o"], inv_tau),
        "cp": net.score("cp", f_cp, text["cp"], inv_tau),
    }
    return {"f_a": f_a, "f_o": f_o, "f_cp": f_cp, "text": text, "scores": scores}


def branch_scores(model, f_cls, vocab, mask, inv_tau, chunk=1024):
    """Eval-mode branch logits for every pair of the attribute x object grid.

    ``mask`` is a boolean vector over the grid (row-major, ``a * n + o``);
    masked-out pair entries of ``s_p``/``s_cp`` hold :func:`sentinel`.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != vocab.m * vocab.n:
        raise ContractError(f"mask must cover the {vocab.m}x{vocab.n} grid")
    if not mask.any():
        raise ContractError("candidate mask is empty")
    f_cls = np.asarray(f_cls)
    single = f_cls.ndim == 1
    rows = f_cls.reshape(1, -1) if single else f_cls
    grid = np.array(vocab.grid(), dtype=np.int64)
    cand = grid[mask]
    out = {b: [] for b in BRANCHES}
    for start in range(0, rows.shape[0], chunk):
        g = ad.Graph()
        net = model.bind(g, requires_grad=False)
        res = forward_scores(net, rows[start : start + chunk], cand, inv_tau)
        for b in BRANCHES:
            out[b].append(res["scores"][b].value)
    s = {b: np.concatenate(v, axis=0) for b, v in out.items()}
    fill = sentinel(s["p"].dtype)
    for b in ("p", "cp"):
        full = np.full((rows.shape[0], mask.size), fill, dtype=s[b].dtype)
        full[:, mask] = s[b]
        s[b] = full
    if single:
        s = {b: v[0] for b, v in s.items()}
    return BranchScores(s["p"], s["a"], s["o"], s["cp"])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, extra=None):
    """Write parameters plus a JSON config echo.

    Layout: ``PBCK | u32 version | u32 json_len | json | u32 count |
    count x (u16 name_len | name | u32 ndim | ndim x u32 | f32 data)``.
    """
    meta = {"model": asdict(model.config), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(Model, extra)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    try:
        version, jlen = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(buf[pos : pos + jlen].decode("utf-8"))
        pos += jlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(buf):
                raise DataError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    model = Model(ModelConfig(**meta["model"]))
    if set(params) != set(model.params):
        raise DataError(f"{path}: parameter names do not match the model layout")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise DataError(f"{path}: {name} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name] = arr.astype(ad.get_dtype())
    return model, meta.get("extra", {})
