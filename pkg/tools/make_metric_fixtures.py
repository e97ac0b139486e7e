#!/usr/bin/env python3
"""Generate frozen reference scores for tests/fixtures/metric_reference.json.

The scorers below are an adaptation of the reference coco-caption
implementation (https://github.com/tylin/coco-caption, BSD-licensed;
BLEU by the corpus-level scorer with option="closest", ROUGE-L with
beta=1.2, CIDEr with clipping and the sigma=6 Gaussian length penalty).
They are intentionally independent of the groundcap package: the test
suite compares groundcap.metrics against the numbers this script wrote.

Run from the repository root:  python3 tools/make_metric_fixtures.py
"""

import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# reference BLEU
# ---------------------------------------------------------------------------


def bleu_precook(s, n=4):
    words = s.split()
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i : i + k])] += 1
    return (len(words), counts)


def bleu_cook_refs(refs, n=4):
    reflen = []
    maxcounts = {}
    for ref in refs:
        rl, counts = bleu_precook(ref, n)
        reflen.append(rl)
        for ngram, count in counts.items():
            maxcounts[ngram] = max(maxcounts.get(ngram, 0), count)
    return (reflen, maxcounts)

def bleu_cook_test(test, reflen_refmaxcounts, n=4):
    reflen, refmaxcounts = reflen_refmaxcounts
    testlen, counts = bleu_precook(test, n)
    result = {}
    result["reflen"] = reflen
    result["testlen"] = testlen
    result["guess"] = [max(0, testlen - k + 1) for k in range(1, n + 1)]
    result["correct"] = [0] * n
    for ngram, count in counts.items():
        result["correct"][len(ngram) - 1] += min(refmaxcounts.get(ngram, 0), count)
    return result


def reference_bleu(gts, res, n=4, option="closest"):
    small = 1e-9
    tiny = 1e-15
    ctest = []
    for image_id in gts:
        cooked_refs = bleu_cook_refs(gts[image_id], n)
        ctest.append(bleu_cook_test(res[image_id][0], cooked_refs, n))
    totalcomps = {"testlen": 0, "reflen": 0, "guess": [0] * n, "correct": [0] * n}
    for comps in ctest:
        testlen = comps["testlen"]
        if option == "closest":
            reflen = min((abs(l - testlen), l) for l in comps["reflen"])[1]
        elif option == "average":
            reflen = float(sum(comps["reflen"])) / len(comps["reflen"])
        else:
            reflen = min(comps["reflen"])
        totalcomps["testlen"] += testlen
        totalcomps["reflen"] += reflen
        for key in ("guess", "correct"):
            for k in range(n):
                totalcomps[key][k] += comps[key][k]
    bleus = []
    score = 1.0
    for k in range(n):
        score *= float(totalcomps["correct"][k] + tiny) / (totalcomps["guess"][k] + small)
        bleus.append(score ** (1.0 / (k + 1)))
    ratio = (totalcomps["testlen"] + tiny) / (totalcomps["reflen"] + small)
    if ratio < 1:
        for k in range(n):
            bleus[k] *= math.exp(1 - 1 / ratio)
    return bleus


# ---------------------------------------------------------------------------
# reference ROUGE-L
# ---------------------------------------------------------------------------


def my_lcs(string, sub):
    if len(string) < len(sub):
        sub, string = string, sub
    lengths = [[0 for _ in range(len(sub) + 1)] for _ in range(len(string) + 1)]
    for j in range(1, len(sub) + 1):
        for i in range(1, len(string) + 1):
            if string[i - 1] == sub[j - 1]:
                lengths[i][j] = lengths[i - 1][j - 1] + 1
            else:
                lengths[i][j] = max(lengths[i - 1][j], lengths[i][j - 1])
    return lengths[len(string)][len(sub)]


def reference_rouge(gts, res, beta=1.2):
    scores = []
    for image_id in gts:
        token_c = res[image_id][0].split(" ")
        prec = []
        rec = []
        for reference in gts[image_id]:
            token_r = reference.split(" ")
            lcs = my_lcs(token_r, token_c)
            prec.append(lcs / float(len(token_c)))
            rec.append(lcs / float(len(token_r)))
        prec_max = max(prec)
        rec_max = max(rec)
        if prec_max != 0 and rec_max != 0:
            score = ((1 + beta**2) * prec_max * rec_max) / float(rec_max + beta**2 * prec_max)
        else:
            score = 0.0
        scores.append(score)
    return float(np.mean(scores)), scores


# ---------------------------------------------------------------------------
# reference CIDEr (the coco-caption scorer: clipping + Gaussian penalty)
# ---------------------------------------------------------------------------


def cider_precook(s, n=4):
    words = s.split()
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i : i + k])] += 1
    return counts


def reference_cider(gts, res, n=4, sigma=6.0):
    crefs = []
    ctest = []
    for image_id in gts:
        crefs.append([cider_precook(ref) for ref in gts[image_id]])
        ctest.append(cider_precook(res[image_id][0]))
    document_frequency = defaultdict(float)
    for refs in crefs:
        for ngram in set(ngram for ref in refs for ngram in ref):
            document_frequency[ngram] += 1
    ref_len = np.log(float(len(crefs)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n)]
        length = 0
        norm = [0.0 for _ in range(n)]
        for ngram, term_freq in cnts.items():
            df = np.log(max(1.0, document_frequency[ngram]))
            k = len(ngram) - 1
            vec[k][ngram] = float(term_freq) * (ref_len - df)
            norm[k] += pow(vec[k][ngram], 2)
            if k == 1:
                length += term_freq
        norm = [np.sqrt(x) for x in norm]
        return vec, norm, length

    def sim(vec_hyp, vec_ref, norm_hyp, norm_ref, length_hyp, length_ref):
        delta = float(length_hyp - length_ref)
        val = np.array([0.0 for _ in range(n)])
        for k in range(n):
            for ngram, count in vec_hyp[k].items():
                val[k] += min(vec_hyp[k][ngram], vec_ref[k][ngram]) * vec_ref[k][ngram]
            if (norm_hyp[k] != 0) and (norm_ref[k] != 0):
                val[k] /= norm_hyp[k] * norm_ref[k]
            val[k] *= np.e ** (-(delta**2) / (2 * sigma**2))
        return val

    scores = []
    for test, refs in zip(ctest, crefs):
        vec, norm, length = counts2vec(test)
        score = np.array([0.0 for _ in range(n)])
        for ref in refs:
            vec_ref, norm_ref, length_ref = counts2vec(ref)
            score += sim(vec, vec_ref, norm, norm_ref, length, length_ref)
        score_avg = np.mean(score)
        score_avg /= len(refs)
        score_avg *= 10.0
        scores.append(float(score_avg))
    return float(np.mean(scores)), scores


# ---------------------------------------------------------------------------
# fixture corpus (10 images, pre-tokenized: tokens joined by single spaces)
# ---------------------------------------------------------------------------

CORPUS = [
    {
        "candidate": "a dog runs across the green field",
        "references": ["a dog runs across the green field"],
    },
    {
        "candidate": "the the the",
        "references": ["the cat", "a cat on a mat"],
    },
    {
        "candidate": "purple elephants fly quietly",
        "references": ["a man rides a bike", "a person on a bicycle"],
    },
    {
        "candidate": "a cat sits on the mat",
        "references": [
            "a cat is sitting on the mat",
            "the cat sat on a mat",
            "a small cat rests on the mat",
        ],
    },
    {
        "candidate": "two dogs play with a ball",
        "references": ["two dogs are playing with a red ball", "dogs play with a ball outside"],
    },
    {
        "candidate": "a bus",
        "references": ["a big red bus parked on the street", "a bus on a city street"],
    },
    {
        "candidate": "a man is riding a very long wave in the ocean today",
        "references": ["a man rides a wave", "a surfer on a wave"],
    },
    {
        "candidate": "a group of people stand near a train",
        "references": [
            "people standing near a train",
            "a group of travelers wait for the train",
        ],
    },
    {
        "candidate": "a bird a bird a bird",
        "references": ["a bird sits on a branch", "a small bird on a tree branch"],
    },
    {
        "candidate": "there is a traffic light next to a car",
        "references": [
            "a traffic light next to a car",
            "a car stopped at a traffic light",
        ],
    },
]


def score_corpus(corpus):
    gts = {i: entry["references"] for i, entry in enumerate(corpus)}
    res = {i: [entry["candidate"]] for i, entry in enumerate(corpus)}
    bleus = reference_bleu(gts, res)
    rouge, rouge_per_image = reference_rouge(gts, res)
    cider_score, cider_per_image = reference_cider(gts, res)
    return {
        "BLEU-1": bleus[0],
        "BLEU-2": bleus[1],
        "BLEU-3": bleus[2],
        "BLEU-4": bleus[3],
        "ROUGE-L": rouge,
        "CIDEr": cider_score,
        "CIDEr_per_image": cider_per_image,
        "ROUGE-L_per_image": rouge_per_image,
    }


def main():
    doubled = [
        {"candidate": e["candidate"], "references": e["references"] * 2} for e in CORPUS
    ]
    payload = {
        "corpus": CORPUS,
        "expected": score_corpus(CORPUS),
        "expected_doubled_references": score_corpus(doubled),
    }
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "metric_reference.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    for key in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr"):
        print(f"  {key}: {payload['expected'][key]:.10f}")


if __name__ == "__main__":
    main()
