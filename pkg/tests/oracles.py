"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np

LD = np.longdouble


def _sig(x):
    return 1 / (1 + np.exp(-x))


def _inv2(D):
    det = D[0, 0] * D[1, 1] - D[0, 1] * D[1, 0]
    return np.array([[D[1, 1], -D[0, 1]], [-D[1, 0], D[0, 0]]], dtype=LD) / det


def reference_loss(tensors, lambda_raw, variant, xs, ys, eps, eta=None, hidden=48, layers=2):
    """Average per-section cost of the rho=2 rnn policy, evaluated in extended precision.

    Written with scalar loops and explicit cubic-section algebra, sharing no
    code with the package.
    """
    W = {k: np.asarray(v, dtype=LD) for k, v in tensors.items()}
    lam = np.log1p(np.exp(np.asarray(lambda_raw, dtype=LD)))
    B, T, N = ys.shape
    total = LD(0)
    for b in range(B):
        val = np.array(ys[b, 0], dtype=LD)
        der = np.zeros(N, dtype=LD)
        h = [np.zeros(hidden, dtype=LD) for _ in range(layers)]
        x_prev = LD(0)
        for t in range(T):
            u = LD(xs[t]) - x_prev
            x_prev = LD(xs[t])
            y = np.asarray(ys[b, t], dtype=LD)
            feat = np.concatenate([[u], y, np.asarray(eps[b], dtype=LD), np.stack([val, der], 1).ravel()])
            inp = W["input.weight"] @ feat + W["input.bias"]
            for l in range(layers):
                gi = W[f"gru.{l}.weight_ih"] @ inp + W[f"gru.{l}.bias_ih"]
                gh = W[f"gru.{l}.weight_hh"] @ h[l] + W[f"gru.{l}.bias_hh"]
                H = hidden
                rg = _sig(gi[:H] + gh[:H])
                zg = _sig(gi[H:2 * H] + gh[H:2 * H])
                ng = np.tanh(gi[2 * H:] + rg * gh[2 * H:])
                h[l] = (1 - zg) * ng + zg * h[l]
                inp = h[l]
            r = (W["output.weight"] @ inp + W["output.bias"]).reshape(N, 2)
            M = np.array([[4 * u, 6 * u**2], [6 * u**2, 12 * u**3]], dtype=LD)
            q = np.array([u**2, u**3], dtype=LD)
            for n in range(N):
                w = y[n] - val[n] - der[n] * u
                if variant == "consistent":
                    D = M + lam[n] * np.eye(2, dtype=LD)
                    m = lam[n] * r[n]
                else:
                    D = np.outer(q, q) + LD(eta) * M + lam[n] * np.eye(2, dtype=LD)
                    m = q * w + lam[n] * r[n]
                Di = _inv2(D)
                beta = Di @ m
                if variant == "consistent":
                    v = beta @ q - w
                    e_n = LD(eps[b, n])
                    if abs(v) > e_n:
                        g = Di @ q
                        beta = beta - (v - np.sign(v) * e_n) / (q @ g) * g
                    total += beta @ M @ beta
                else:
                    total += (beta @ q - w) ** 2 + LD(eta) * (beta @ M @ beta)
                a2, a3 = beta
                val[n], der[n] = (val[n] + der[n] * u + a2 * u**2 + a3 * u**3,
                                  der[n] + 2 * a2 * u + 3 * a3 * u**2)
    return total / (B * T)


def dense_step_oracle(A, b, e_prev, p, y, eps, consistent):
    """Minimize ``a'Aa + b'a`` over ``a = [e_prev; tail]`` (optionally with
    ``|a'p - y| <= eps``) by enumerating the three active sets and solving
    each equality-constrained KKT system densely. One series."""
    rho = len(e_prev)
    n = 2 * rho
    # equality rows fixing the head
    Ceq = np.zeros((rho, n))
    Ceq[:, :rho] = np.eye(rho)
    cands = [None]
    if consistent:
        cands += [y + eps, y - eps]
    best = None
    for target in cands:
        C = Ceq if target is None else np.vstack([Ceq, p])
        d = e_prev if target is None else np.concatenate([e_prev, [target]])
        K = np.block([[2 * A, C.T], [C, np.zeros((len(d), len(d)))]])
        sol = np.linalg.solve(K, np.concatenate([-b, d]))
        a = sol[:n]
        if consistent and abs(a @ p - y) > eps + 1e-12:
            continue
        val = a @ A @ a + b @ a
        if best is None or val < best[0]:
            best = (val, a)
    return best[1]


def enumerate_slab_qp(A, lo, hi):
    """``argmin ||z||^2`` s.t. ``lo <= A z <= hi`` by trying every active set."""
    m, n = A.shape
    best = None
    for choice in itertools.product((0, 1, -1), repeat=m):
        S = [i for i in range(m) if choice[i]]
        if S:
            As = A[S]
            bs = np.array([hi[i] if choice[i] == 1 else lo[i] for i in S])
            z = np.linalg.lstsq(As, bs, rcond=None)[0]
            if np.max(np.abs(As @ z - bs)) > 1e-9:
                continue
        else:
            z = np.zeros(n)
        Az = A @ z
        if np.any(Az > hi + 1e-9) or np.any(Az < lo - 1e-9):
            continue
        f = z @ z
        if best is None or f < best[0]:
            best = (f, z)
    return best[1]


def _roughness_gram(u, rho):
    # integral of products of rho-th derivatives of s**i and s**j over [0, u]
    n = 2 * rho
    G = np.zeros((n, n))
    for i in range(rho, n):
        for j in range(rho, n):
            ci = np.prod(np.arange(i - rho + 1, i + 1))
            cj = np.prod(np.arange(j - rho + 1, j + 1))
            p = i + j - 2 * rho + 1
            G[i, j] = ci * cj * u**p / p
    return G


def full_batch_oracle(xs, ys, eps, e0, rho, variant, eta=None):
    """Whole-stream optimum for one series in raw coefficient space.

    Unknowns are all section coefficients; continuity rows tie every head
    to the previous section's end-point Taylor vector. Smoothing is one KKT
    solve; consistent enumerates every active set of the interval
    constraints (feasible for T <= 4 or so).
    """
    T = len(xs)
    n = 2 * rho
    nv = n * T
    H = np.zeros((nv, nv))
    g = np.zeros(nv)
    rows, rhs = [], []
    x_prev = 0.0
    P = []
    for t in range(T):
        u = xs[t] - x_prev
        x_prev = xs[t]
        sl = slice(n * t, n * (t + 1))
        p = u ** np.arange(n)
        P.append((sl, p))
        G = _roughness_gram(u, rho)
        if variant == "smoothing":
            H[sl, sl] += 2 * (np.outer(p, p) + eta * G)
            g[sl] += -2 * ys[t] * p
        else:
            H[sl, sl] += 2 * G
        for d in range(rho):
            row = np.zeros(nv)
            row[n * t + d] = 1.0
            if t == 0:
                rows.append(row)
                rhs.append(e0[d])
            else:
                # head d of section t equals the d-th Taylor coefficient at the end of section t-1
                psl = slice(n * (t - 1), n * t)
                up = xs[t - 1] - (xs[t - 2] if t >= 2 else 0.0)
                for j in range(d, n):
                    from math import comb

                    row[psl.start + j] -= comb(j, d) * up ** (j - d)
                rows.append(row)
                rhs.append(0.0)
    C0, d0 = np.array(rows), np.array(rhs)

    def solve(C, d):
        m = len(d)
        K = np.block([[H, C.T], [C, np.zeros((m, m))]])
        return np.linalg.solve(K, np.concatenate([-g, d]))[:nv]

    if variant == "smoothing":
        return solve(C0, d0).reshape(T, n)
    best = None
    for choice in itertools.product((0, 1, -1), repeat=T):
        C, d = [C0], [d0]
        for t, c in enumerate(choice):
            if c:
                sl, p = P[t]
                row = np.zeros(nv)
                row[sl] = p
                C.append(row[None])
                d.append([ys[t] + c * eps])
        try:
            a = solve(np.vstack(C), np.concatenate(d))
        except np.linalg.LinAlgError:
            continue
        vals = np.array([a[sl] @ p for sl, p in P])
        if np.any(np.abs(vals - ys) > eps + 1e-9):
            continue
        cost = 0.5 * a @ H @ a
        if best is None or cost < best[0]:
            best = (cost, a)
    return best[1].reshape(T, n)


def central_difference(tensors, lambda_raw, name, index, variant, xs, ys, eps, eta=None, step=1e-5):
    """Central finite difference of :func:`reference_loss` along one coordinate."""
    h = LD(step)
    tp = {k: np.asarray(v, dtype=LD).copy() for k, v in tensors.items()}
    lr = np.asarray(lambda_raw, dtype=LD).copy()
    flat = (lr if name == "lambda_raw" else tp[name]).reshape(-1)
    old = flat[index]
    flat[index] = old + h
    up = reference_loss(tp, lr, variant, xs, ys, eps, eta)
    flat[index] = old - h
    down = reference_loss(tp, lr, variant, xs, ys, eps, eta)
    return float((up - down) / (2 * h))


def step_objective(u, y, variant, rho=2, eta=None, lam=None, r=None):
    """``(A, b)`` of one series' step cost ``a'Aa + b'a``, built from the raw definitions.

    Smoothing: ``(psi(x_t) - y)^2 + eta * roughness``; consistent: roughness alone.
    The rnn pull ``lam * ||tail - r||^2`` is added when ``lam`` is given.
    """
    n = 2 * rho
    p = u ** np.arange(n)
    G = _roughness_gram(u, rho)
    if variant == "smoothing":
        A = np.outer(p, p) + eta * G
        b = -2 * y * p
    else:
        A = G.copy()
        b = np.zeros(n)
    if lam is not None:
        A[rho:, rho:] += lam * np.eye(rho)
        b[rho:] += -2 * lam * np.asarray(r)
    return A, b, p
