#!/usr/bin/env python3
"""
ShiftTrace desk-scale experiments.

Runs the directional checks that are too slow for the unit test suite and
prints one JSON summary per experiment:

    label-transfer   label transport accuracy and loss estimation error (eps = 0)
    faithfulness     mean S-Faith of XPE vs LAD vs AxS under Gaussian noise
    roar             ROAR-S of XPE vs random rankings with an MLP
    gpc              GPC of XPE/XPPE vs LAD/AxS for a partly missing column
    selection-bias   group importance ratio of XPE/XPPE vs LAD/AxS across selection-bias targets
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from app import config  # noqa: E402
from app.core import RngSpec, make_grouping  # noqa: E402
from app.metrics import gpc, group_importance_ratio, roar_s, shift_faithfulness_dataset  # noqa: E402
from app.model import ModelKind, TrainConfig, train  # noqa: E402
from app.monitor import explain_shift  # noqa: E402
from app.simulator import (apply_corruption, make_blobs, make_group_signal_data, selection_bias_split,  # noqa: E402
                           split_scenario)
from app.transport import align, label_preservation_gap, transfer_labels  # noqa: E402

# Features 0-2 carry model weight, 3-4 are zeroed out of the model
NOISY_FEATURES = [0, 1, 2, 3, 4]
DUMMY_FEATURES = [3, 4]


def label_transfer(seed: int) -> Dict[str, Any]:
    """Brightness shift on a quarter of the features of 4-class blobs."""
    data = make_blobs(800, 8, n_classes=4, separation=10.0, noise=1.0, seed=seed)
    scenario = split_scenario(
        apply_corruption(data, "brightness", {"b": 0.5}, features=[0, 1], seed=seed), 0.5, seed
    )
    source_train, source_test, _, target_test = scenario.splits()
    model = train(ModelKind.LOGISTIC_REGRESSION, source_train, TrainConfig(seed=seed))
    result = align(source_test, target_test, RngSpec(seed).stream("transport.subsample"))
    transfer = transfer_labels(result.transport_map, source_test.subset(result.source_index))
    kept_target = target_test.subset(result.target_index)
    return {
        "seed": seed,
        "label_transport_accuracy": float(np.mean(transfer.estimated_labels == kept_target.labels)),
        "loss_gap": label_preservation_gap(model, kept_target, transfer),
    }


def _noise_scenario(seed: int, n: int = 200):
    data = make_blobs(n, 20, n_classes=2, separation=10.0, noise=1.0, seed=seed)
    scenario = apply_corruption(data, "gaussian_noise", {"sigma": 2.0}, features=NOISY_FEATURES, seed=seed)
    return split_scenario(scenario, 0.5, seed)


def _dummy_logreg(data, seed: int):
    model = train(ModelKind.LOGISTIC_REGRESSION, data, TrainConfig(seed=seed))
    model.params["W"][DUMMY_FEATURES, :] = 0.0
    return model


def faithfulness(seed: int) -> Dict[str, Any]:
    scenario = _noise_scenario(seed)
    source_train, source_test, _, target_test = scenario.splits()
    model = _dummy_logreg(source_train, seed)
    grouping = make_grouping(20)
    pre_shift = scenario.true_pre_shift[scenario.test_index]

    means = {}
    for method in ("xpe", "lad", "axs"):
        explanation = explain_shift(method, model, source_test, target_test, grouping, rng=RngSpec(seed))
        result = shift_faithfulness_dataset(
            explanation.attributions, model, explanation.target, pre_shift[explanation.target_index],
            source_test.labels[explanation.target_index], grouping, subset_size=5, rng=RngSpec(seed),
        )
        means[method] = result["mean"]
    ordered = all(means[m] is not None for m in means) and means["xpe"] > max(means["lad"], means["axs"])
    return {"seed": seed, "s_faith": means, "xpe_first": bool(ordered)}


def roar(seed: int) -> Dict[str, Any]:
    scenario = _noise_scenario(seed, n=400)
    train_config = TrainConfig(seed=seed, epochs=50)
    scores = {
        method: roar_s(method, scenario, ModelKind.MLP, train_config, 0.05, seed).roar_s
        for method in ("xpe", "random")
    }
    return {"seed": seed, "roar_s": scores, "xpe_lower": scores["xpe"] < scores["random"]}


def gpc_check(seed: int) -> Dict[str, Any]:
    data = make_blobs(300, 6, n_classes=2, separation=4.0, noise=1.0, seed=seed)
    scenario = apply_corruption(data, "missing", {"q": 0.25}, features=[0], seed=seed)
    model = train(ModelKind.LOGISTIC_REGRESSION, data, TrainConfig(seed=seed))
    grouping = make_grouping(6)

    scores = {}
    for method in ("xpe", "xppe", "lad", "axs"):
        explanation = explain_shift(method, model, data, scenario.target, grouping, rng=RngSpec(seed),
                                    tabular=True)
        rows = explanation.target_index
        keep = [j for j, a in enumerate(explanation.attributions) if abs(a.v_full - a.v_empty) >= config.TAU]
        scores[method] = gpc(
            [explanation.attributions[j].values[0] for j in keep], model,
            explanation.target.features[keep], scenario.true_pre_shift[rows[keep]],
            scenario.target.labels[rows[keep]],
        )
    baseline_scores = [scores[m] for m in ("lad", "axs") if scores[m] is not None]
    best_baseline = max(baseline_scores) if baseline_scores else -1.0
    won = all(scores[m] is not None and scores[m] > best_baseline for m in ("xpe", "xppe"))
    return {"seed": seed, "gpc": scores, "xpe_xppe_first": bool(won)}


def selection_bias(seed: int) -> Dict[str, Any]:
    band = [0, 1]
    d = 8
    signal = make_group_signal_data(800, d, band, delta=3.0, seed=seed)
    split = selection_bias_split(signal.data, signal.group, rho=1.0, seed=seed, size=150)
    model = train(ModelKind.LOGISTIC_REGRESSION, split.source, TrainConfig(seed=seed))
    grouping = make_grouping(d)

    ratios: Dict[str, List[float]] = {}
    for method in ("xpe", "xppe", "lad", "axs"):
        ratios[method] = [
            group_importance_ratio(
                explain_shift(method, model, split.source, target, grouping, rng=RngSpec(seed)).attributions, band
            )
            for target in split.targets
        ]

    def increasing(values: List[float]) -> bool:
        return all(v is not None for v in values) and values[0] < values[1] < values[2]

    uniform_share = len(band) / d
    return {
        "seed": seed,
        "mixes": split.mixes,
        "ratios": ratios,
        "xpe_increasing": increasing(ratios["xpe"]),
        "xpe_low_at_zero": ratios["xpe"][0] is not None and ratios["xpe"][0] < 2 * uniform_share,
        "xppe_increasing": increasing(ratios["xppe"]),
        "baselines_increasing": {m: increasing(ratios[m]) for m in ("lad", "axs")},
    }


EXPERIMENTS: Dict[str, Callable[[int], Dict[str, Any]]] = {
    "label-transfer": label_transfer,
    "faithfulness": faithfulness,
    "roar": roar,
    "gpc": gpc_check,
    "selection-bias": selection_bias,
}


def summarize(name: str, runs: List[Dict[str, Any]]) -> Dict[str, Any]:
    if name == "label-transfer":
        accuracy = float(np.mean([r["label_transport_accuracy"] for r in runs]))
        gap = float(np.mean([r["loss_gap"] for r in runs]))
        return {"mean_accuracy": accuracy, "mean_loss_gap": gap, "passed": accuracy >= 0.95 and gap <= 0.05}
    if name == "faithfulness":
        wins = sum(r["xpe_first"] for r in runs)
        xpe = [r["s_faith"]["xpe"] for r in runs if r["s_faith"]["xpe"] is not None]
        mean_xpe = float(np.mean(xpe)) if xpe else None
        return {"wins": wins, "mean_xpe": mean_xpe, "passed": wins >= len(runs) - 1 and (mean_xpe or 0) > 0.5}
    if name == "roar":
        wins = sum(r["xpe_lower"] for r in runs)
        return {"wins": wins, "passed": wins >= len(runs) - 1}
    if name == "gpc":
        wins = sum(r["xpe_xppe_first"] for r in runs)
        return {"wins": wins, "passed": wins >= len(runs) - 1}
    proportional = sum(r["xpe_increasing"] and r["xpe_low_at_zero"] and r["xppe_increasing"] for r in runs)
    baseline_runs = sum(any(r["baselines_increasing"].values()) for r in runs)
    return {
        "proportional": proportional,
        "baseline_increasing_runs": baseline_runs,
        "passed": proportional == len(runs) and baseline_runs == 0,
    }


def main():
    parser = argparse.ArgumentParser(description="Run ShiftTrace desk-scale experiments")
    parser.add_argument("--experiments", type=str, default=",".join(EXPERIMENTS),
                        help=f"Comma-separated subset of {list(EXPERIMENTS)}")
    parser.add_argument("--seeds", type=int, default=5, help="Number of seeds per experiment")
    parser.add_argument("--first-seed", type=int, default=0)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args()
    config.setup_logging(args.log_level)

    selected = [name.strip() for name in args.experiments.split(",") if name.strip()]
    unknown = [name for name in selected if name not in EXPERIMENTS]
    if unknown:
        parser.error(f"Unknown experiments: {unknown}")

    for name in selected:
        runs = [EXPERIMENTS[name](seed) for seed in range(args.first_seed, args.first_seed + args.seeds)]
        print(json.dumps({"experiment": name, "runs": runs, "summary": summarize(name, runs)}, indent=2))


if __name__ == "__main__":
    main()
