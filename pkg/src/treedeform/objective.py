"""Differentiable evaluation of the deformation losses.

The optimizer needs many gradient evaluations per node, so the loss is
mirrored here on dense arrays with jax providing reverse-mode gradients;
central finite differences over the same objective stay available as the
reference gradient. Parameters for one node are the pose trajectories of
every trainable scaffold (the node's own plus its chain copies), packed
flat as [tx, ty, tz, qw, qx, qy, qz] per (basis, frame), basis-major.

All math runs in float64 and is pure, so repeated evaluation is bitwise
reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

from .errors import NonFiniteObjective  # noqa: E402


# ---------------------------------------------------------------------------
# quaternion helpers on trailing-axis-4 arrays (wxyz)

def _qmul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return jnp.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _qconj(q):
    return q * jnp.array([1.0, -1.0, -1.0, -1.0])


def _qnorm(q):
    return q / jnp.linalg.norm(q, axis=-1, keepdims=True)


def _qrotate(q, v):
    """Rotate 3-vectors by unit quaternions (broadcasting)."""
    qv = q[..., 1:]
    qw = q[..., :1]
    t = 2.0 * jnp.cross(qv, v)
    return v + qw * t + jnp.cross(qv, t)


def _vecq(v):
    """Embed 3-vectors as pure quaternions."""
    return jnp.concatenate([jnp.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def _angle_sq_rel(rel):
    """Squared rotation angle of a near-unit relative quaternion.

    Works on s = |vec|^2 / |rel|^2 = sin^2(angle/2), whose cross terms
    cancel bitwise when the two source rotations are identical, so the
    zero-motion case is exactly zero. A series replaces arcsin below s0,
    where its derivative would otherwise blow up under 0/0; the double
    cover collapses since only the vector part enters.
    """
    n2 = jnp.sum(rel * rel, axis=-1)
    s = jnp.clip(jnp.sum(rel[..., 1:] ** 2, axis=-1) / n2, 0.0, 1.0)
    s0 = 1e-8
    s_safe = jnp.where(s < s0, s0, s)
    exact = 4.0 * jnp.arcsin(jnp.sqrt(s_safe)) ** 2
    series = 4.0 * s + (4.0 / 3.0) * s * s + (32.0 / 45.0) * s * s * s
    return jnp.where(s < s0, series, exact)


# ---------------------------------------------------------------------------
# field evaluation and loss terms for one scaffold component

def predict_positions(q, t, static):
    """Deform every anchor to every target frame of the node interval.

    q: (N, F, 4) raw rotations, t: (N, F, 3) translations. Returns
    (P, Fi, 3) predicted positions for static["anchors"] anchored at
    static["anchor_fidx"], evaluated at frame offsets static["tau_fidx"].
    """
    anchors = static["anchors"]          # (P, 3)
    s_idx = static["anchor_fidx"]        # (P,)
    tau_idx = static["tau_fidx"]         # (Fi,)
    edges = static["edges"]              # (N, K)
    radii = static["radii"]              # (N,)

    qh = _qnorm(q)
    t_s_all = jnp.swapaxes(jnp.take(t, s_idx, axis=1), 0, 1)       # (P, N, 3)
    d2 = jnp.sum((anchors[:, None, :] - t_s_all) ** 2, axis=-1)    # (P, N)
    psi = jnp.argmin(d2, axis=1)                                   # (P,)
    neigh = jnp.take(edges, psi, axis=0)                           # (P, K)
    d2_nb = jnp.take_along_axis(d2, neigh, axis=1)                 # (P, K)
    # shift-invariant normalization keeps the weights well defined when the
    # raw Gaussian falloff underflows
    a = d2_nb / (2.0 * jnp.take(radii, neigh))
    a = a - jnp.min(a, axis=1, keepdims=True)
    w = jnp.exp(-a)
    w = w / jnp.sum(w, axis=1, keepdims=True)

    q_s = qh[neigh, s_idx[:, None]]                                # (P, K, 4)
    t_s = t[neigh, s_idx[:, None]]                                 # (P, K, 3)
    q_d = qh[neigh[:, None, :], tau_idx[None, :, None]]            # (P, Fi, K, 4)
    t_d = t[neigh[:, None, :], tau_idx[None, :, None]]             # (P, Fi, K, 3)

    dq = _qmul(q_d, _qconj(q_s[:, None, :, :]))                    # (P, Fi, K, 4)
    dt = t_d - _qrotate(dq, t_s[:, None, :, :])                    # (P, Fi, K, 3)
    dual = 0.5 * _qmul(_vecq(dt), dq)
    align = jnp.sum(dq * dq[:, :, :1, :], axis=-1, keepdims=True)
    wk = jnp.where(align < 0, -1.0, 1.0) * w[:, None, :, None]
    br = jnp.sum(wk * dq, axis=2)                                  # (P, Fi, 4)
    bd = jnp.sum(wk * dual, axis=2)
    n = jnp.linalg.norm(br, axis=-1, keepdims=True)
    q_w = br / n
    t_w = 2.0 * _qmul(bd / n, _qconj(q_w))[..., 1:]
    return _qrotate(q_w, anchors[:, None, :]) + t_w


def _track_sse(q, t, static):
    pred = predict_positions(q, t, static)
    err = jnp.sum((pred - static["obs"]) ** 2, axis=-1) * static["vis"]
    return jnp.sum(err)


def _arap_sse(q, t, psi, eta, s_off, d_off):
    """Distance-change plus local-coordinate terms over non-self edge pairs."""
    qh = _qnorm(q)
    tp = t[psi]   # (E, F, 3)
    te = t[eta]
    qp = qh[psi]

    def at(arr, off):
        return arr[:, off]

    rel_s = at(te, s_off) - at(tp, s_off)      # (E, Fp, 3)
    rel_d = at(te, d_off) - at(tp, d_off)
    # sqrt needs a floor so coincident bases cannot produce a NaN gradient;
    # the 1e-32 bias is far below every stated tolerance
    dist_s = jnp.sqrt(jnp.sum(rel_s ** 2, axis=-1) + 1e-32)
    dist_d = jnp.sqrt(jnp.sum(rel_d ** 2, axis=-1) + 1e-32)
    dist_term = (dist_d - dist_s) ** 2

    loc_s = _qrotate(_qconj(at(qp, s_off)), rel_s)
    loc_d = _qrotate(_qconj(at(qp, d_off)), rel_d)
    loc_term = jnp.sum((loc_d - loc_s) ** 2, axis=-1)
    return jnp.sum(dist_term + loc_term)


def _vel_sse(q, t):
    qh = _qnorm(q)
    dt2 = jnp.sum((t[:, 1:] - t[:, :-1]) ** 2, axis=-1)
    rel = _qmul(_qconj(qh[:, :-1]), qh[:, 1:])
    return jnp.sum(dt2 + _angle_sq_rel(rel))


def _acc_sse(q, t):
    qh = _qnorm(q)
    ddt2 = jnp.sum((t[:, 2:] - 2.0 * t[:, 1:-1] + t[:, :-2]) ** 2, axis=-1)
    rel = _qmul(_qconj(qh[:, :-1]), qh[:, 1:])
    rel2 = _qmul(_qconj(rel[:, :-1]), rel[:, 1:])
    return jnp.sum(ddt2 + _angle_sq_rel(rel2))


# ---------------------------------------------------------------------------
# whole-node objective: pooled means over all components

def _node_loss(params, statics, lams, counts):
    """params/statics: one entry per component; lams: 4 scalars; counts: 4 scalars."""
    track = arap = vel = acc = 0.0
    for (q, t), st in zip(params, statics):
        if st["anchors"].shape[0] > 0:
            track = track + _track_sse(q, t, st)
        if st["arap_psi"].shape[0] > 0:
            arap = arap + _arap_sse(q, t, st["arap_psi"], st["arap_eta"],
                                    st["pair_s"], st["pair_d"])
        if t.shape[1] >= 2:
            vel = vel + _vel_sse(q, t)
        if t.shape[1] >= 3:
            acc = acc + _acc_sse(q, t)
    track = track / jnp.maximum(counts[0], 1.0)
    arap = arap / jnp.maximum(counts[1], 1.0)
    vel = vel / jnp.maximum(counts[2], 1.0)
    acc = acc / jnp.maximum(counts[3], 1.0)
    total = lams[0] * track + lams[1] * arap + lams[2] * acc + lams[3] * vel
    return total, (track, arap, acc, vel)


_node_loss_jit = jax.jit(_node_loss)
_node_grad_jit = jax.jit(jax.value_and_grad(_node_loss, has_aux=True))
_predict_jit = jax.jit(predict_positions)
_track_kernel = jax.jit(_track_sse)
_arap_kernel = jax.jit(_arap_sse)
_vel_kernel = jax.jit(_vel_sse)
_acc_kernel = jax.jit(_acc_sse)


def central_difference(f, x: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        grad[i] = (f(hi) - f(lo)) / (2.0 * epsilon)
    return grad


# ---------------------------------------------------------------------------
# component assembly and flat parameter packing

@dataclass
class ComponentSpec:
    """Arrays describing one scaffold component of a node objective.

    obs/vis cover the node's interval frames; offsets index the component's
    own frame range, which may be wider for chain copies.
    """

    q0: np.ndarray            # (N, F, 4) initial rotations
    t0: np.ndarray            # (N, F, 3) initial translations
    edges: np.ndarray         # (N, K)
    radii: np.ndarray         # (N,)
    anchors: np.ndarray       # (P, 3)
    anchor_fidx: np.ndarray   # (P,)
    obs: np.ndarray           # (P, Fi, 3)
    vis: np.ndarray           # (P, Fi)
    tau_fidx: np.ndarray      # (Fi,)

    def static_arrays(self) -> dict:
        n, k = self.edges.shape
        psi = np.repeat(np.arange(n), k)
        eta = self.edges.ravel()
        keep = psi != eta
        f = self.t0.shape[1]
        p = len(self.anchor_fidx)
        fi = len(self.tau_fidx)
        pair_s = np.arange(f - 1, dtype=int)
        return {
            "edges": jnp.asarray(self.edges),
            "radii": jnp.asarray(self.radii),
            "anchors": jnp.asarray(self.anchors.reshape(p, 3)),
            "anchor_fidx": jnp.asarray(self.anchor_fidx, dtype=int),
            "obs": jnp.asarray(self.obs.reshape(p, fi, 3)),
            "vis": jnp.asarray(self.vis, dtype=float).reshape(p, fi),
            "tau_fidx": jnp.asarray(self.tau_fidx, dtype=int),
            "arap_psi": jnp.asarray(psi[keep]),
            "arap_eta": jnp.asarray(eta[keep]),
            "pair_s": jnp.asarray(pair_s),
            "pair_d": jnp.asarray(pair_s + 1),
        }

    def term_counts(self) -> tuple[float, float, float, float]:
        """(track, arap, vel, acc) term counts; self edges count in arap."""
        n, k = self.edges.shape
        f = self.t0.shape[1]
        track = float(np.sum(self.vis))
        arap = float(n * k * max(f - 1, 0))
        vel = float(n * max(f - 1, 0))
        acc = float(n * max(f - 2, 0))
        return track, arap, vel, acc


class NodeObjective:
    """Packs trainable components into a flat vector and evaluates the loss.

    Flat layout per component: for each basis, for each frame,
    [tx, ty, tz, qw, qx, qy, qz].
    """

    def __init__(self, components: list[ComponentSpec],
                 lam_track: float, lam_arap: float, lam_acc: float, lam_vel: float):
        if not components:
            raise ValueError("need at least one component")
        self.components = components
        self.shapes = [(c.t0.shape[0], c.t0.shape[1]) for c in components]
        self.statics = tuple(c.static_arrays() for c in components)
        counts = np.array([c.term_counts() for c in components]).sum(axis=0)
        # counts order in _node_loss: (track, arap, vel, acc)
        self.counts = (float(counts[0]), float(counts[1]), float(counts[2]), float(counts[3]))
        self.lams = (float(lam_track), float(lam_arap), float(lam_acc), float(lam_vel))

    # -- flat packing ------------------------------------------------------
    @property
    def n_params(self) -> int:
        return sum(n * f * 7 for n, f in self.shapes)

    def initial_flat(self) -> np.ndarray:
        return self.pack([(c.q0, c.t0) for c in self.components])

    def pack(self, qt_list) -> np.ndarray:
        parts = []
        for q, t in qt_list:
            parts.append(np.concatenate([t, q], axis=-1).ravel())
        return np.concatenate(parts)

    def unpack(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        off = 0
        for n, f in self.shapes:
            size = n * f * 7
            block = flat[off:off + size].reshape(n, f, 7)
            out.append((block[..., 3:7], block[..., 0:3]))
            off += size
        return out

    def _params_tuple(self, flat: np.ndarray):
        return tuple((jnp.asarray(q), jnp.asarray(t)) for q, t in self.unpack(flat))

    # -- evaluation --------------------------------------------------------
    def value(self, flat: np.ndarray) -> tuple[float, dict]:
        total, (track, arap, acc, vel) = _node_loss_jit(
            self._params_tuple(flat), self.statics, self.lams, self.counts)
        total = float(total)
        if not np.isfinite(total):
            raise NonFiniteObjective("loss is not finite")
        return total, {"track": float(track), "arap": float(arap),
                       "acc": float(acc), "vel": float(vel)}

    def value_and_grad(self, flat: np.ndarray) -> tuple[float, dict, np.ndarray]:
        (total, (track, arap, acc, vel)), grads = _node_grad_jit(
            self._params_tuple(flat), self.statics, self.lams, self.counts)
        total = float(total)
        if not np.isfinite(total):
            raise NonFiniteObjective("loss is not finite")
        flat_grad = self.pack([(np.asarray(gq), np.asarray(gt)) for gq, gt in grads])
        if not np.all(np.isfinite(flat_grad)):
            raise NonFiniteObjective("gradient is not finite")
        parts = {"track": float(track), "arap": float(arap),
                 "acc": float(acc), "vel": float(vel)}
        return total, parts, flat_grad

    def fd_gradient(self, flat: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
        """Central finite differences over the same objective."""
        return central_difference(lambda x: self.value(x)[0], flat, epsilon)

    # -- views over the flat vector ---------------------------------------
    def renormalized(self, flat: np.ndarray) -> np.ndarray:
        """Copy of flat with every rotation renormalized to unit length."""
        out = flat.copy()
        off = 0
        for n, f in self.shapes:
            size = n * f * 7
            block = out[off:off + size].reshape(n, f, 7)
            q = block[..., 3:7]
            block[..., 3:7] = q / np.linalg.norm(q, axis=-1, keepdims=True)
            off += size
        return out

    def own_frame_norms(self, grad_flat: np.ndarray) -> np.ndarray:
        """Per-frame L2 norm of the first component's gradient block."""
        n, f = self.shapes[0]
        block = grad_flat[:n * f * 7].reshape(n, f, 7)
        return np.linalg.norm(block, axis=(0, 2))

    def predict(self, flat: np.ndarray, component: int = 0) -> np.ndarray:
        """(P, Fi, 3) predicted anchor positions for one component."""
        q, t = self.unpack(flat)[component]
        return np.asarray(_predict_jit(jnp.asarray(q), jnp.asarray(t),
                                       self.statics[component]))
