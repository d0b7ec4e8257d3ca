"""Exhaustive segmentation scoring in exact arithmetic.

Every one-to-one assignment of ground-truth classes to predicted labels is
enumerated; the best maximizes correctly labelled points, then summed IoU.
"""
from __future__ import annotations

import itertools
from fractions import Fraction


def confusion_counts(pred, gt):
    pred, gt = list(pred), list(gt)
    gcls, pcls = sorted(set(gt)), sorted(set(pred))
    counts = {(g, p): 0 for g in gcls for p in pcls}
    for p, g in zip(pred, gt):
        counts[(g, p)] += 1
    return gcls, pcls, counts


def brute_force_scores(pred, gt) -> tuple[Fraction, Fraction]:
    gcls, pcls, counts = confusion_counts(pred, gt)
    n = len(gt)
    gsize = {g: sum(counts[(g, p)] for p in pcls) for g in gcls}
    psize = {p: sum(counts[(g, p)] for g in gcls) for p in pcls}

    def iou(g, p):
        inter = counts[(g, p)]
        return Fraction(inter, gsize[g] + psize[p] - inter) if inter else Fraction(0)

    best = None
    slots = pcls + [None] * len(gcls)  # None = class left unmatched
    for assign in set(itertools.permutations(slots, len(gcls))):
        correct = sum(counts[(g, p)] for g, p in zip(gcls, assign) if p is not None)
        total_iou = sum((iou(g, p) for g, p in zip(gcls, assign) if p is not None), Fraction(0))
        key = (correct, total_iou)
        if best is None or key > best:
            best = key
    correct, total_iou = best
    return total_iou / len(gcls), Fraction(correct, n)
