"""Text-level collaboration on scripted mock models.

Three voters answer ten multiple-choice questions; majority voting fixes
some of their individual mistakes. Then a debate pool is run alongside each
of its members alone, and we measure how many of the questions that no
single member could solve the debate gets right.

    python3 demos/vote_debate_emergence.py
"""
import tempfile
from pathlib import Path

from modelcollab.runner import RunConfig, compare_runs, load_manifest, run_emergence, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "modelcollab" / "data" / "configs"


def main():
    out = Path(tempfile.mkdtemp(prefix="modelcollab-demo-"))

    # Step 1: one majority-vote run over the 10-question fixture.
    res = run_experiment(RunConfig.load(CONFIGS / "mv10_majority_vote.json", output_dir=out))
    print(f"majority vote accuracy: {res.manifest['summary']['score']:.2f}")
    for line in (res.run_dir / "records.jsonl").read_text().splitlines()[:3]:
        print("  record:", line[:110], "...")

    # Step 2: debate plus every member alone, then the emergence rate.
    report = run_emergence(RunConfig.load(CONFIGS / "em20_debate.json", output_dir=out))
    for label, rate in report["emergence"].items():
        print(f"{label}: solves {rate:.0%} of the questions no single model could")

    # Step 3: the per-domain table with the best single model as baseline.
    print()
    print(compare_runs([load_manifest(p) for p in report["runs"]]).to_text())
    print(f"\nrun directories live under {out}")


if __name__ == "__main__":
    main()
