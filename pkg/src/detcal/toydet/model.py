"""Dense toy detector: one shared trunk, dropout, classification and box heads.

Every cell sees a (2r+1) x (2r+1) neighbourhood of the feature grid.  The trunk
maps it to a hidden vector (linear + ReLU).  Separate dropout masks feed the
classification head (K + 1 logits, index K is background) and the regression
head (4 raw box parameters).  Raw parameters decode to a normalized
(cx, cy, w, h) box anchored at the cell centre.

The network layers are plain numpy with hand-written backward passes; the
calibration losses on top of the head outputs go through the scalar tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import CHANNELS, SyntheticScene, cell_centers

PARAM_NAMES = ("w1", "b1", "wc", "bc", "wr", "br")
MAX_DISTANCE = 0.35  # largest centre-to-edge distance, normalized units


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ToyDetector:
    num_classes: int
    params: dict
    dropout: float = 0.1
    radius: int = 3
    grid: int = 16

    @classmethod
    def init(cls, num_classes: int, seed: int = 0, hidden: int = 64, dropout: float = 0.1,
             radius: int = 3, grid: int = 16, channels: int = CHANNELS) -> "ToyDetector":
        rng = np.random.default_rng([seed, 0])
        fan_in = (2 * radius + 1) ** 2 * channels
        params = {
            "w1": rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, hidden)),
            "b1": np.zeros(hidden),
            "wc": rng.normal(scale=np.sqrt(1.0 / hidden), size=(hidden, num_classes + 1)),
            "bc": np.zeros(num_classes + 1),
            "wr": rng.normal(scale=0.1 * np.sqrt(1.0 / hidden), size=(hidden, 4)),
            "br": np.full(4, -1.0),
        }
        return cls(num_classes, params, dropout, radius, grid)

    def copy(self) -> "ToyDetector":
        return ToyDetector(self.num_classes, {k: v.copy() for k, v in self.params.items()},
                           self.dropout, self.radius, self.grid)

    @property
    def hidden(self) -> int:
        return self.params["b1"].shape[0]

    # -- forward pieces --------------------------------------------------

    def patches(self, scene: SyntheticScene) -> np.ndarray:
        """(H*W, F) neighbourhood features, zero padded at the border."""
        r = self.radius
        f = scene.features
        padded = np.pad(f, ((r, r), (r, r), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(0, 1))
        # win: H x W x C x kh x kw
        h, w = f.shape[:2]
        return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)

    def trunk(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pre = x @ self.params["w1"] + self.params["b1"]
        return pre, np.maximum(pre, 0.0)

    def heads(self, hidden: np.ndarray, mask_c: Optional[np.ndarray] = None,
              mask_r: Optional[np.ndarray] = None):
        hc = hidden if mask_c is None else hidden * mask_c
        hr = hidden if mask_r is None else hidden * mask_r
        logits = hc @ self.params["wc"] + self.params["bc"]
        raw = hr @ self.params["wr"] + self.params["br"]
        return logits, raw

    def decode(self, raw: np.ndarray) -> np.ndarray:
        """Normalized (cx, cy, w, h) boxes from raw edge-distance parameters.

        The four raw outputs map through a sigmoid to the distances from the
        cell centre to the left, top, right and bottom box edges.
        """
        centers = cell_centers(self.grid, self.grid)
        d = MAX_DISTANCE * _sigmoid(raw)
        l, t, r, b = d[..., 0], d[..., 1], d[..., 2], d[..., 3]
        cx = centers[:, 0] + 0.5 * (r - l)
        cy = centers[:, 1] + 0.5 * (b - t)
        return np.stack([cx, cy, l + r, t + b], axis=-1)

    def decode_backward(self, raw: np.ndarray, g_boxes: np.ndarray) -> np.ndarray:
        s = _sigmoid(raw)
        dd = MAX_DISTANCE * s * (1.0 - s)
        gcx, gcy, gw, gh = (g_boxes[..., i] for i in range(4))
        g_dist = np.stack([gw - 0.5 * gcx, gh - 0.5 * gcy, gw + 0.5 * gcx, gh + 0.5 * gcy], axis=-1)
        return g_dist * dd

    def dropout_masks(self, rng: np.random.Generator, n_cells: int):
        """Inverted-dropout masks for the two heads (already rescaled)."""
        p = self.dropout
        if p <= 0.0:
            return None, None
        keep = 1.0 - p
        shape = (n_cells, self.hidden)
        mc = (rng.random(shape) < keep) / keep
        mr = (rng.random(shape) < keep) / keep
        return mc, mr

    def predict(self, scene: SyntheticScene):
        """Deterministic pass (dropout off): logits (H*W, K+1), boxes (H*W, 4)."""
        _, hid = self.trunk(self.patches(scene))
        logits, raw = self.heads(hid)
        return logits, self.decode(raw)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "arch": {"num_classes": self.num_classes, "hidden": self.hidden,
                     "dropout": self.dropout, "radius": self.radius, "grid": self.grid},
            "params": {k: {"shape": list(self.params[k].shape),
                           "data": self.params[k].ravel().tolist()} for k in PARAM_NAMES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDetector":
        arch = d["arch"]
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        return cls(arch["num_classes"], params, arch["dropout"], arch["radius"], arch["grid"])


@dataclass
class McPass:
    """Cached forward state of N stochastic passes over one scene."""

    x: np.ndarray          # (P, F)
    pre: np.ndarray        # (P, H)
    hidden: np.ndarray     # (P, H)
    masks_c: list
    masks_r: list
    logits: np.ndarray     # (N, P, K+1)
    raw: np.ndarray        # (N, P, 4)
    boxes: np.ndarray      # (N, P, 4)


def mc_forward(model: ToyDetector, scene: SyntheticScene, n_passes: int,
               rng: np.random.Generator) -> McPass:
    """Trunk once, then ``n_passes`` dropout-perturbed head evaluations."""
    if n_passes < 1:
        raise ValueError("need at least one pass")
    x = model.patches(scene)
    pre, hid = model.trunk(x)
    mcs, mrs, ls, raws = [], [], [], []
    for _ in range(n_passes):
        mc, mr = model.dropout_masks(rng, x.shape[0])
        logits, raw = model.heads(hid, mc, mr)
        mcs.append(mc)
        mrs.append(mr)
        ls.append(logits)
        raws.append(raw)
    raw = np.stack(raws)
    return McPass(x, pre, hid, mcs, mrs, np.stack(ls), raw, model.decode(raw))


def mc_samples(state: McPass, cells) -> list:
    """Per-cell (logits N x K, boxes N x 4) using only the foreground logits."""
    k = state.logits.shape[2] - 1
    return [(state.logits[:, c, :k], state.boxes[:, c, :]) for c in cells]


def backward(model: ToyDetector, state: McPass, g_logits: np.ndarray, g_boxes: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(logits) and d(loss)/d(boxes) per pass."""
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    g_hidden = np.zeros_like(state.hidden)
    g_raw = model.decode_backward(state.raw, g_boxes)
    for n in range(state.logits.shape[0]):
        mc, mr = state.masks_c[n], state.masks_r[n]
        hc = state.hidden if mc is None else state.hidden * mc
        hr = state.hidden if mr is None else state.hidden * mr
        gl, gr = g_logits[n], g_raw[n]
        grads["wc"] += hc.T @ gl
        grads["bc"] += gl.sum(axis=0)
        grads["wr"] += hr.T @ gr
        grads["br"] += gr.sum(axis=0)
        ghc = gl @ p["wc"].T
        ghr = gr @ p["wr"].T
        g_hidden += ghc if mc is None else ghc * mc
        g_hidden += ghr if mr is None else ghr * mr
    g_pre = g_hidden * (state.pre > 0)
    grads["w1"] = state.x.T @ g_pre
    grads["b1"] = g_pre.sum(axis=0)
    return grads
