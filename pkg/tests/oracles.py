"""Independent reference implementations used only by the tests."""

import numpy as np


def find_s_peaks_literal(data_ecg, r_peaks):
    """Line-by-line transcription of the S-peak pseudocode.

    Reading past the last sample ends the whole scan, the same as the
    pseudocode's ``break``.
    """
    data_ecg = list(data_ecg)
    s_peaks = []
    n = len(r_peaks)
    try:
        for index in range(n):
            i = r_peaks[index]
            cnt = i
            if cnt + 1 >= len(data_ecg):
                break
            while data_ecg[cnt] > data_ecg[cnt + 1]:
                cnt = cnt + 1
                if cnt >= len(data_ecg):
                    break
            s_peaks.append(cnt)
    except IndexError:
        pass
    return s_peaks


def rr_rule_trace(rr, rr_min, rr_max, window):
    """Scalar trace of the merge/insert rules on an RR list in seconds."""
    rr = [float(v) for v in rr]
    h = window // 2

    def med(seq, i):
        part = sorted(seq[max(0, i - h): i + h + 1])
        k = len(part)
        return part[k // 2] if k % 2 else 0.5 * (part[k // 2 - 1] + part[k // 2])

    changed = True
    while changed:
        changed = False
        for i, v in enumerate(rr):
            if v < rr_min - 1e-12:
                m = med(rr, i)
                left = abs(rr[i - 1] + v - m) if i > 0 else None
                right = abs(rr[i + 1] + v - m) if i + 1 < len(rr) else None
                if right is None or (left is not None and left <= right):
                    rr[i - 1: i + 1] = [rr[i - 1] + v]
                else:
                    rr[i: i + 2] = [v + rr[i + 1]]
                changed = True
                break
    out = []
    for i, v in enumerate(rr):
        if v > rr_max + 1e-12:
            n = int(round(v / med(rr, i)))
            out.extend([v / n] * n)
        else:
            out.append(v)
    return out


def metrics_scalar(tp, tn, fp, fn):
    tot = tp + tn + fp + fn
    acc = (tp + tn) / tot if tot else 0.0
    sen = tp / (tp + fn) if tp + fn else 0.0
    spe = tn / (tn + fp) if tn + fp else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * prec * sen / (prec + sen) if prec + sen else 0.0
    prec_n = tn / (tn + fn) if tn + fn else 0.0
    f1n = 2 * prec_n * spe / (prec_n + spe) if prec_n + spe else 0.0
    return {"accuracy": acc, "sensitivity": sen, "specificity": spe, "f1_sa": f1, "f1_non_sa": f1n}


def fd_gradient_check(model, x, y, loss_fn, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients over every element."""
    _, grads = loss_fn(model, x, y)
    worst = 0.0
    where = None
    for name, p in model.params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp, _ = loss_fn(model, x, y)
            flat[j] = old - eps
            lm, _ = loss_fn(model, x, y)
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            rel = abs(g[j] - num) / max(abs(g[j]), abs(num), 1e-8)
            if rel > worst:
                worst, where = rel, (name, j)
    return worst, where


def random_rr_peaks(rng, fs=100.0, n=40):
    """Peak indices with realistic RR plus injected false and missed beats."""
    rr = rng.uniform(0.55, 1.2, n)
    idx = np.cumsum(np.rint(rr * fs).astype(int))
    extra = idx[:-1] + rng.integers(5, 25, idx.size - 1)
    keep_extra = rng.random(extra.size) < 0.08
    drop = rng.random(idx.size) < 0.1
    drop[0] = drop[-1] = False
    out = np.union1d(idx[~drop], extra[keep_extra])
    return out[np.concatenate(([True], np.diff(out) > 0))]
