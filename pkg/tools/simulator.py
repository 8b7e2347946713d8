#!/usr/bin/env python3
"""
ShiftTrace Scenario Simulator

Generates batches of synthetic shift scenarios plus a manifest listing them.
Can be used as a CLI tool or imported as a module.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

from app.simulator import CORRUPTION_KINDS, generate, save_scenario  # noqa: E402


def generate_batch(output_dir: str, count: int, corruptions: List[str], n: int = 400, d: int = 8,
                   n_classes: int = 2, features: Optional[List[int]] = None, seed: int = 0) -> Dict[str, Any]:
    """
    Generate `count` scenarios, cycling through the corruption kinds.

    Scenario i uses seed `seed + i`, so a batch is reproducible as a whole.

    Returns:
        Manifest dictionary
    """
    scenarios = []
    for i in range(count):
        corruption = corruptions[i % len(corruptions)]
        scenario_id = f"SCENARIO-{i + 1:04d}"
        scenario = generate(kind="blobs", n=n, d=d, n_classes=n_classes, corruption=corruption,
                            features=features, seed=seed + i)
        directory = save_scenario(scenario, os.path.join(output_dir, scenario_id))
        scenarios.append({
            "id": scenario_id,
            "path": str(directory),
            "corruption": corruption,
            "seed": seed + i,
        })
    return {"scenarios": scenarios}


def save_manifest(path: str, manifest: Dict[str, Any]) -> None:
    """Save the manifest as JSON."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    print(f"✓ Saved: {path}")


def main():
    parser = argparse.ArgumentParser(description="Generate synthetic shift scenarios for ShiftTrace")
    parser.add_argument("--scenarios", type=int, default=5, help="Number of scenarios to generate")
    parser.add_argument("--corruption", choices=CORRUPTION_KINDS, default="brightness",
                        help="Corruption applied to every scenario")
    parser.add_argument("--mixed-corruptions", action="store_true",
                        help="Cycle through all corruption kinds")
    parser.add_argument("--output", type=str, default="generated_scenarios", help="Output directory")
    parser.add_argument("--manifest", type=str, help="Manifest path (default: <output>/manifest.json)")
    parser.add_argument("--n", type=int, default=400, help="Rows per domain")
    parser.add_argument("--d", type=int, default=8, help="Feature count")
    parser.add_argument("--classes", type=int, default=2, help="Class count")
    parser.add_argument("--features", type=str, help="Corrupted features, comma-separated (default all)")
    parser.add_argument("--seed", type=int, default=0, help="Seed of the first scenario")

    args = parser.parse_args()
    corruptions = CORRUPTION_KINDS if args.mixed_corruptions else [args.corruption]
    features = [int(v) for v in args.features.split(",")] if args.features else None

    print(f"\nGenerating {args.scenarios} shift scenarios...")
    print(f"   Corruption: {'mixed' if args.mixed_corruptions else args.corruption}")
    print(f"   Size: {args.n} rows x {args.d} features, {args.classes} classes")
    print(f"   Output: {args.output}\n")

    manifest = generate_batch(args.output, args.scenarios, corruptions, args.n, args.d, args.classes,
                              features, args.seed)
    manifest_path = args.manifest or os.path.join(args.output, "manifest.json")
    save_manifest(manifest_path, manifest)

    print(f"\n✓ Successfully generated {args.scenarios} scenarios!")
    print(f"   Manifest: {manifest_path}")


if __name__ == "__main__":
    main()
