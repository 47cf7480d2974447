"""Independent reference computations used to derive frozen golden values.

Everything here is written against scalar loops, mpmath or exact fractions
and shares no code with the package.
"""

from fractions import Fraction

import mpmath as mp

mp.mp.dps = 50


def e0(t):
    t = mp.mpf(t)
    return mp.mpf("0.6108") * mp.e ** (mp.mpf("17.27") * t / (t + mp.mpf("237.3")))


def psychrometrics(t_min, t_max, pressure):
    e_s = (e0(t_min) + e0(t_max)) / 2
    tm = (mp.mpf(t_min) + mp.mpf(t_max)) / 2
    delta = 4098 * e0(tm) / (tm + mp.mpf("237.3")) ** 2
    gamma = mp.mpf("0.665e-3") * mp.mpf(pressure)
    return e_s, delta, gamma


def et0(t, u2, rn, g, e_s, e_a, delta, gamma):
    t, u2, rn, g, e_s, e_a = (mp.mpf(v) for v in (t, u2, rn, g, e_s, e_a))
    num = mp.mpf("0.408") * delta * (rn - g) + gamma * (900 / (t + 273)) * u2 * (e_s - e_a)
    return num / (delta + gamma * (1 + mp.mpf("0.34") * u2))


def attention(q, k, v):
    d = len(q[0])
    out, weights = [], []
    for qi in q:
        scores = [sum(mp.mpf(a) * mp.mpf(b) for a, b in zip(qi, kj)) / mp.sqrt(d) for kj in k]
        exps = [mp.e ** s for s in scores]
        z = sum(exps)
        w = [e / z for e in exps]
        weights.append(w)
        out.append([sum(w[j] * mp.mpf(v[j][c]) for j in range(len(v))) for c in range(len(v[0]))])
    return out, weights


def adam_trace(theta, grads, lr, beta1=Fraction(9, 10), beta2=Fraction(999, 1000), eps=Fraction(1, 10**8)):
    """Scalar Adam in exact arithmetic except for the square root (mpmath)."""
    m = v = Fraction(0)
    theta = mp.mpf(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        g = Fraction(g)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - mp.mpf(Fraction(lr).numerator) / Fraction(lr).denominator * mp.mpf(m_hat.numerator) / m_hat.denominator / (
            mp.sqrt(mp.mpf(v_hat.numerator) / v_hat.denominator) + mp.mpf(eps.numerator) / eps.denominator)
        out.append(theta)
    return out


def simple_regression(xs, ys):
    """Exact least-squares slope and intercept for one regressor."""
    xs = [Fraction(x) for x in xs]
    ys = [Fraction(y) for y in ys]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sum((x - mx) ** 2 for x in xs)
    return slope, my - slope * mx


def _sig(x):
    return 1 / (1 + mp.e ** (-x))


def lstm_cell_sequence(inputs, w, u, b):
    """Single-layer LSTM evaluated unit by unit; gate order i, f, g, o."""
    hidden = len(u)
    h = [mp.mpf(0)] * hidden
    c = [mp.mpf(0)] * hidden
    outs = []
    for x in inputs:
        new_h, new_c = [], []
        for j in range(hidden):
            def pre(gate):
                col = gate * hidden + j
                return (sum(mp.mpf(x[i]) * mp.mpf(w[i][col]) for i in range(len(x)))
                        + sum(h[i] * mp.mpf(u[i][col]) for i in range(hidden)) + mp.mpf(b[col]))
            ig, fg, gg, og = _sig(pre(0)), _sig(pre(1)), mp.tanh(pre(2)), _sig(pre(3))
            cj = fg * c[j] + ig * gg
            new_c.append(cj)
            new_h.append(og * mp.tanh(cj))
        h, c = new_h, new_c
        outs.append(h)
    return outs


def metrics(pred, target):
    n = len(pred)
    err = [p - t for p, t in zip(pred, target)]
    mean_t = sum(target) / n
    ss_res = sum(e * e for e in err)
    ss_tot = sum((t - mean_t) ** 2 for t in target)
    return {
        "r2": 1 - ss_res / ss_tot,
        "mae": sum(abs(e) for e in err) / n,
        "mape": sum(abs(e / t) for e, t in zip(err, target)) / n,
        "rmse": (ss_res / n) ** 0.5,
        "bias": sum(err) / n,
    }


def _layernorm(row, gamma, beta, eps=mp.mpf("1e-5")):
    n = len(row)
    mean = sum(row) / n
    var = sum((r - mean) ** 2 for r in row) / n
    return [mp.mpf(g) * (r - mean) / mp.sqrt(var + eps) + mp.mpf(b) for r, g, b in zip(row, gamma, beta)]


def _matvec(row, w):
    return [sum(mp.mpf(row[i]) * mp.mpf(w[i][j]) for i in range(len(row))) for j in range(len(w[0]))]


def transformer(params, inputs):
    """Encoder regressor evaluated element by element (same-padded convolution, post-norm layers)."""
    conv = params["conv.w"]
    k = len(conv)
    pad = k // 2
    t_len, n_feat, width = len(inputs), len(inputs[0]), len(conv[0][0])
    h = []
    for t in range(t_len):
        row = []
        for d in range(width):
            acc = mp.mpf(params["conv.b"][d])
            for j in range(k):
                src = t + j - pad
                if 0 <= src < t_len:
                    acc += sum(mp.mpf(inputs[src][f]) * mp.mpf(conv[j][f][d]) for f in range(n_feat))
            row.append(acc)
        h.append(row)
    layer = 0
    while f"enc{layer}.wq" in params:
        pre = f"enc{layer}."
        q = [_matvec(r, params[pre + "wq"]) for r in h]
        kk = [_matvec(r, params[pre + "wk"]) for r in h]
        v = [_matvec(r, params[pre + "wv"]) for r in h]
        ctx, _ = attention(q, kk, v)
        proj = [_matvec(r, params[pre + "wo"]) for r in ctx]
        h = [_layernorm([a + b for a, b in zip(hr, pr)], params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
             for hr, pr in zip(h, proj)]
        new = []
        for r in h:
            ff = [max(a + mp.mpf(b), mp.mpf(0)) for a, b in zip(_matvec(r, params[pre + "ff1.w"]), params[pre + "ff1.b"])]
            ff = [a + mp.mpf(b) for a, b in zip(_matvec(ff, params[pre + "ff2.w"]), params[pre + "ff2.b"])]
            new.append(_layernorm([a + b for a, b in zip(r, ff)], params[pre + "ln2.gamma"], params[pre + "ln2.beta"]))
        h = new
        layer += 1
    pooled = [sum(h[t][d] for t in range(t_len)) / t_len for d in range(width)]
    z = [max(a + mp.mpf(b), mp.mpf(0)) for a, b in zip(_matvec(pooled, params["mlp1.w"]), params["mlp1.b"])]
    return _matvec(z, params["mlp2.w"])[0] + mp.mpf(params["mlp2.b"][0])
