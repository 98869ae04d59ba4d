"""Plain-math re-evaluation of the difficulty weight for one Dice history."""
import math


def raw_weight(hist, eps=1e-8, alpha=0.2):
    du = dl = 0.0
    for prev, cur in zip(hist[:-1], hist[1:]):
        s = abs(math.log(cur / prev))
        if cur > prev:
            dl += s
        else:
            du += s
    d = (du + eps) / (dl + eps)
    w_rev = sum(1.0 - x for x in hist[1:]) / (len(hist) - 1)
    return w_rev * d ** alpha
