"""Trace frozen-group digests and the unfreezing schedule through one training run.

Prints one line per optimizer step where something changes: the set of frozen
groups, or the digest of the originally frozen parameters.
"""

import argparse
import tempfile
from dataclasses import replace

from layerparti.data import generate_synthetic
from layerparti.experiments import DESK
from layerparti.partition import frozen_parameter_digest
from layerparti.train import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ssl", default="te", choices=("none", "pi", "te"))
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--split-level", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data, _ = generate_synthetic(40, 2000, 0, seed=args.seed)
    cfg = replace(DESK, ssl=args.ssl, epochs=args.epochs, split_level=args.split_level, seed=args.seed)
    trainer = Trainer(cfg, data, tempfile.mkdtemp())
    state = trainer.partition
    watched = list(state.frozen_groups)
    print(f"max_iterations={trainer.plan.max_iterations} unfreeze_from={state.unfreeze_from} F={watched}")
    last = {"digest": frozen_parameter_digest(trainer.params, state, watched), "frozen": list(watched)}

    def report(t, tr):
        digest = frozen_parameter_digest(tr.params, state, watched)
        if digest != last["digest"] or state.frozen_groups != last["frozen"]:
            print(f"t={t:4d} frozen={state.frozen_groups} F-digest={digest[:12]}")
            last.update(digest=digest, frozen=list(state.frozen_groups))

    trainer.run(on_step=report)


if __name__ == "__main__":
    main()
