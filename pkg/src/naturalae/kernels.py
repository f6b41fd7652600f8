"""Hot inner loops, each with a numba kernel and a vectorized numpy twin.

The public functions dispatch on :func:`naturalae._accel.use_numba`. Both
paths compute the same quantities; accumulation order may differ, so the
two backends agree to rounding, not bit-for-bit.
"""

import numpy as np

from ._accel import njit, use_numba

__all__ = [
    "bilinear_gather",
    "bilinear_scatter",
    "col2im",
    "nn_query_tree",
    "nn_query_brute",
    "nn_query",
]


# ---------------------------------------------------------------- bilinear


@njit
def _bilinear_gather_nb(src, coords):
    H, W, C = src.shape
    Ho, Wo = coords.shape[0], coords.shape[1]
    out = np.zeros((Ho, Wo, C))
    for i in range(Ho):
        for j in range(Wo):
            x = coords[i, j, 0]
            y = coords[i, j, 1]
            fx0 = np.floor(x)
            fy0 = np.floor(y)
            x0 = int(fx0)
            y0 = int(fy0)
            ax = x - fx0
            ay = y - fy0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= H:
                    continue
                wy = ay if dy == 1 else 1.0 - ay
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= W:
                        continue
                    w = wy * (ax if dx == 1 else 1.0 - ax)
                    if w == 0.0:
                        continue
                    for c in range(C):
                        out[i, j, c] += w * src[yy, xx, c]
    return out


@njit
def _bilinear_scatter_nb(grad, coords, H, W):
    Ho, Wo, C = grad.shape
    out = np.zeros((H, W, C))
    for i in range(Ho):
        for j in range(Wo):
            x = coords[i, j, 0]
            y = coords[i, j, 1]
            fx0 = np.floor(x)
            fy0 = np.floor(y)
            x0 = int(fx0)
            y0 = int(fy0)
            ax = x - fx0
            ay = y - fy0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= H:
                    continue
                wy = ay if dy == 1 else 1.0 - ay
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= W:
                        continue
                    w = wy * (ax if dx == 1 else 1.0 - ax)
                    if w == 0.0:
                        continue
                    for c in range(C):
                        out[yy, xx, c] += w * grad[i, j, c]
    return out


def _corners(coords, H, W):
    x = coords[..., 0]
    y = coords[..., 1]
    fx0 = np.floor(x)
    fy0 = np.floor(y)
    ax = x - fx0
    ay = y - fy0
    x0 = fx0.astype(np.int64)
    y0 = fy0.astype(np.int64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xx = x0 + dx
        yy = y0 + dy
        w = (ay if dy else 1.0 - ay) * (ax if dx else 1.0 - ax)
        valid = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        yield np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1), np.where(valid, w, 0.0)


def _bilinear_gather_np(src, coords):
    H, W, C = src.shape
    out = np.zeros(coords.shape[:2] + (C,))
    for yy, xx, w in _corners(coords, H, W):
        out += w[..., None] * src[yy, xx]
    return out


def _bilinear_scatter_np(grad, coords, H, W):
    C = grad.shape[2]
    flat = np.zeros((C, H * W))
    for yy, xx, w in _corners(coords, H, W):
        idx = (yy * W + xx).ravel()
        wg = w[..., None] * grad
        for c in range(C):
            flat[c] += np.bincount(idx, weights=wg[..., c].ravel(), minlength=H * W)
    return flat.T.reshape(H, W, C)


def bilinear_gather(src, coords):
    """Bilinear samples of ``src`` [H,W,C] at ``coords`` [H',W',2] (x, y); zero outside."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if use_numba():
        return _bilinear_gather_nb(src, coords)
    return _bilinear_gather_np(src, coords)


def bilinear_scatter(grad, coords, H, W):
    """Adjoint of :func:`bilinear_gather` with respect to the source image."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if use_numba():
        return _bilinear_scatter_nb(grad, coords, int(H), int(W))
    return _bilinear_scatter_np(grad, coords, int(H), int(W))


# ------------------------------------------------------------------ col2im


@njit
def _col2im_nb(dcols, Hp, Wp, stride):
    N, Ho, Wo, k, _, C = dcols.shape
    out = np.zeros((N, Hp, Wp, C))
    for n in range(N):
        for oy in range(Ho):
            for ox in range(Wo):
                for i in range(k):
                    y = oy * stride + i
                    for j in range(k):
                        x = ox * stride + j
                        for c in range(C):
                            out[n, y, x, c] += dcols[n, oy, ox, i, j, c]
    return out


def _col2im_np(dcols, Hp, Wp, stride):
    N, Ho, Wo, k, _, C = dcols.shape
    out = np.zeros((N, Hp, Wp, C))
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    return out


def col2im(dcols, Hp, Wp, stride):
    """Fold patch gradients [N,Ho,Wo,k,k,C] back onto a padded [N,Hp,Wp,C] canvas."""
    dcols = np.ascontiguousarray(dcols, dtype=np.float64)
    if use_numba():
        return _col2im_nb(dcols, int(Hp), int(Wp), int(stride))
    return _col2im_np(dcols, int(Hp), int(Wp), int(stride))


# ------------------------------------------------------- nearest neighbour


@njit
def _nn_query_tree_kernel(points, perm, lo, hi, split_dim, split_val, left, right, queries):
    nq = queries.shape[0]
    best_idx = np.empty(nq, dtype=np.int64)
    best_d2 = np.empty(nq)
    stack = np.empty(128, dtype=np.int64)
    for q in range(nq):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        bd = np.inf
        bi = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if left[node] < 0:
                for t in range(lo[node], hi[node]):
                    p = perm[t]
                    dx = qx - points[p, 0]
                    dy = qy - points[p, 1]
                    dz = qz - points[p, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < bd or (d2 == bd and p < bi):
                        bd = d2
                        bi = p
                continue
            dim = split_dim[node]
            diff = queries[q, dim] - split_val[node]
            if diff < 0.0:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            # ties must stay reachable so the lowest index wins
            if diff * diff <= bd:
                stack[sp] = far
                sp += 1
            stack[sp] = near
            sp += 1
        best_idx[q] = bi
        best_d2[q] = bd
    return best_idx, best_d2


def nn_query_tree(tree, queries):
    """Exact nearest neighbour by k-d tree traversal (compiled or plain Python)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    return _nn_query_tree_kernel(
        tree.points, tree.perm, tree.lo, tree.hi, tree.split_dim, tree.split_val, tree.left, tree.right, queries
    )


def nn_query_brute(points, queries, block=2048):
    """Exhaustive scan; ties resolve to the lowest point index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    idx = np.empty(len(queries), dtype=np.int64)
    d2 = np.empty(len(queries))
    for s in range(0, len(queries), block):
        q = queries[s : s + block]
        dx = q[:, None, 0] - points[None, :, 0]
        dy = q[:, None, 1] - points[None, :, 1]
        dz = q[:, None, 2] - points[None, :, 2]
        d = dx * dx + dy * dy + dz * dz
        i = np.argmin(d, axis=1)
        idx[s : s + block] = i
        d2[s : s + block] = d[np.arange(len(q)), i]
    return idx, d2


def nn_query(tree, queries):
    """k-d tree traversal under numba, blocked exhaustive scan on the numpy path."""
    if use_numba():
        return nn_query_tree(tree, queries)
    return nn_query_brute(tree.points, queries)
