"""Regenerate the tiny trained model used by the attack and harness tests.

    python3 tests/fixtures/make_fixtures.py

Writes tiny_model.ckpt and tiny_model.json (the empirical attack oracle: robust
accuracy of that checkpoint under plain PGD and under momentum PGD).
"""

import json
import os

from meansparse.attacks import AttackSpec, evaluate_robust
from meansparse.data import synth_splits
from meansparse.model import MiniResNet, NetSpec, save_checkpoint
from meansparse.trainer import TrainConfig, train

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = dict(n_train=600, n_test=300, num_classes=10, d_spatial=8, seed=7, spread=0.25)


def splits():
    return synth_splits(DATA["n_train"], DATA["n_test"], DATA["num_classes"], DATA["d_spatial"],
                        DATA["seed"], spread=DATA["spread"])


def main():
    s = splits()
    mean, std = s.train.channel_stats()
    spec = NetSpec(input_shape=(3, 8, 8), num_classes=10, blocks=2, input_mean=mean, input_std=std)
    model = MiniResNet(spec, seed=0)
    cfg = TrainConfig(epochs=4, batch_size=64, decay_epochs=(3,), mode="pgd_at",
                      at_attack=AttackSpec(steps=3, step_size=4 / 255), val_size=100, seed=0)
    best, _ = train(model, s, cfg)
    save_checkpoint(os.path.join(HERE, "tiny_model.ckpt"), best, {"data": DATA})
    spec20 = AttackSpec(steps=20, step_size=2 / 255)
    pgd = evaluate_robust(best, s.test.images, s.test.labels, spec20, attack="pgd")
    mom = evaluate_robust(best, s.test.images, s.test.labels, spec20, attack="apgd-ce")
    record = {"data": DATA, "attack": {"epsilon": "8/255", "steps": 20, "step_size": "2/255"},
              "clean_acc": pgd.clean_acc, "pgd_robust_acc": pgd.robust_acc,
              "momentum_pgd_robust_acc": mom.robust_acc}
    with open(os.path.join(HERE, "tiny_model.json"), "w") as fp:
        json.dump(record, fp, indent=2, sort_keys=True)
        fp.write("\n")
    print(record)


if __name__ == "__main__":
    main()
