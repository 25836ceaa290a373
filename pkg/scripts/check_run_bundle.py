#!/usr/bin/env python3
"""
Check a Run Bundle
Verify that an output directory holds a complete, consistent run
"""

import os
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from simulation.io import SCHEMA_VERSION, read_json  # noqa: E402

EXPECTED_CSV_COLUMNS = {
    "lens.csv": ["s_in", "mu_in", "s_out", "mu_out", "length", "trapped"],
    "verdicts.csv": ["s_in", "mu_in", "h", "normA2", "normB2", "diff2", "defect", "verdict"],
    "shift_demo.csv": ["sigma", "modulated", "frequency", "ratio"],
}


def check_bundle(out_dir: Path) -> List[str]:
    """Return the issues found in one bundle (empty when it is complete)"""

    print(f"\n🔍 Analyzing bundle: {out_dir}")
    print("-" * 40)
    issues = []

    manifest_path = out_dir / "manifest.json"
    if not manifest_path.is_file():
        return [f"{manifest_path}: no manifest (run failed or was interrupted)"]

    manifest = read_json(manifest_path)
    print(f"📊 Subcommand: {manifest.get('subcommand')}")
    print(f"📊 Tool version: {manifest.get('tool_version')}")
    print(f"📊 Config hash: {manifest.get('config_hash', '')[:16]}...")
    print(f"📊 Started / finished: {manifest.get('started')} / {manifest.get('finished')}")

    outputs = manifest.get("outputs", [])
    print(f"📊 Outputs listed: {len(outputs)}")
    for output in outputs:
        path = Path(output)
        if not path.is_file():
            issues.append(f"{path}: listed in manifest but missing")
            continue
        if path.suffix == ".csv":
            frame = pd.read_csv(path)
            expected = EXPECTED_CSV_COLUMNS.get(path.name)
            if expected and list(frame.columns[:len(expected)]) != expected:
                issues.append(f"{path}: columns {list(frame.columns)} do not start with {expected}")
            print(f"    {path.name}: {len(frame)} rows")
        elif path.suffix == ".json" and path.name != "manifest.json":
            data = read_json(path)
            version = data.get("schema_version") if isinstance(data, dict) else None
            if version is not None and version != SCHEMA_VERSION:
                issues.append(f"{path}: schema_version {version} != {SCHEMA_VERSION}")

    summary_path = out_dir / "summary.json"
    if summary_path.is_file():
        claim = read_json(summary_path).get("claim_check", {})
        print(f"📊 Claim check holds: {claim.get('holds')} ({len(claim.get('mismatches', []))} mismatches)")

    if issues:
        print("    ⚠️ Bundle has issues:")
        for issue in issues:
            print(f"      - {issue}")
    else:
        print("    ✅ Bundle complete")
    return issues


def find_bundles(root: Path) -> List[Path]:
    return sorted({p.parent for p in root.rglob("manifest.json")})


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    argv = sys.argv[1:] if argv is None else argv
    root = Path(argv[0]) if argv else Path(os.getenv("LENSPROBE_OUTPUT_ROOT", "./outputs"))

    print("🔍 Checking run bundles")
    print("=" * 50)
    if not root.exists():
        print(f"❌ {root} does not exist")
        return 1

    bundles = [root] if (root / "manifest.json").is_file() else find_bundles(root)
    if not bundles:
        print(f"❌ No bundles with a manifest under {root}")
        return 1

    failed = [b for b in bundles if check_bundle(b)]
    print(f"\n🎯 {len(bundles) - len(failed)}/{len(bundles)} bundles complete")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
