"""Independent reference computations in plain Python (math + lists only).

Nothing here imports the package; the tests compare the implementation
against these and against the constants they produced when first run.
"""

import math


def softmax_prob(logits, c):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    return e[c] / sum(e)


def cross_entropy(logits, y, smoothing=0.0):
    C = len(logits)
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    logp = [v - lse for v in logits]
    if smoothing == 0.0:
        return -logp[y]
    return -sum(((1 - smoothing) if c == y else smoothing / (C - 1)) * logp[c] for c in range(C))


def kl_standard_normal(mu, logvar):
    return 0.5 * (mu * mu + math.exp(logvar) - logvar - 1.0)


def domain_objective(real_probs, fake_probs):
    return sum(math.log(p) for p in real_probs) + sum(math.log(1.0 - p) for p in fake_probs)


def ema_cycle(a, b, m):
    """Fixed points of x <- (1-m) x + m v for v alternating a, b.

    Returns (value after an 'a' update, value after a 'b' update).
    """
    q = 1.0 - m
    after_a = (m * a + q * m * b) / (1.0 - q * q)
    after_b = (m * b + q * m * a) / (1.0 - q * q)
    return after_a, after_b


def cosine_lr(epoch, total, warmup, base, ratio=0.01):
    lo = base * ratio
    if epoch < warmup:
        return lo + (base - lo) * epoch / warmup
    t = (epoch - warmup) / (total - 1 - warmup)
    return lo + (base - lo) * (1 + math.cos(math.pi * t)) / 2


def retrieval(dist, q_ids, q_cams, g_ids, g_cams, filt):
    """Brute-force CMC and mAP: rank every gallery item per query, drop
    same-id-same-camera items when filtering, then read AP off the ranking."""
    n_gallery = len(g_ids)
    hits_at = [0] * n_gallery
    aps = []
    dropped = 0
    for q in range(len(q_ids)):
        order = sorted(range(n_gallery), key=lambda g: (dist[q][g], g))
        if filt:
            order = [g for g in order if not (g_ids[g] == q_ids[q] and g_cams[g] == q_cams[q])]
        rel = [g_ids[g] == q_ids[q] for g in order]
        if not any(rel):
            dropped += 1
            continue
        first = rel.index(True)
        for k in range(first, n_gallery):
            hits_at[k] += 1
        precisions = []
        found = 0
        for rank, r in enumerate(rel, start=1):
            if r:
                found += 1
                precisions.append(found / rank)
        aps.append(sum(precisions) / len(precisions))
    n = len(aps)
    cmc = [h / n for h in hits_at] if n else [0.0] * n_gallery
    return cmc, (sum(aps) / n if n else 0.0), n, dropped


if __name__ == "__main__":
    # the constants frozen into the tests
    print("softmax [1,0] c=0", softmax_prob([1.0, 0.0], 0))
    print("CE K=1 C=2 uniform", cross_entropy([0.0, 0.0], 1))
    print("CE K=8 C=751 uniform", 8 * cross_entropy([0.0] * 751, 3))
    print("KL mu=1", kl_standard_normal(1.0, 0.0))
    print("KL logvar=1", kl_standard_normal(0.0, 1.0))
    print("domain all 0.5", domain_objective([0.5] * 2, [0.5] * 6))
    print("class C=10 uniform", 8 * cross_entropy([0.0] * 10, 0))
    print("class C=2 zeros", 8 * cross_entropy([0.0] * 2, 1))
    print("total all ones", 20 + 1 + 10 + 10 + 1 + 2)
    print("toy epochs", tuple(max(3, e // 50) for e in (300, 200, 200)))
    print("ema cycle a=1 b=3", ema_cycle(1.0, 3.0, 0.1))
    print("AP single hit at rank 2", retrieval([[0.1, 0.2, 0.3]], [1], [0], [2, 1, 3], [1, 1, 1], True))
    print("cosine final", cosine_lr(3, 4, 1, 2e-4))
