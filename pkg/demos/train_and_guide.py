"""Train a small denoiser, then compare unguided, ICG and TSG sampling.

A reduced recipe (width 32, 4000 Adam steps) so the whole script takes
about 15 s on one core; the harness default is width 64, 20k SGD steps.

    python3 demos/train_and_guide.py
"""

from guidelab import (GuidanceConfig, SamplerConfig, TrainConfig, TsgSchedule, evaluate, sample,
                      sym_pair, train)
from guidelab.samplers import balanced_labels


def main(n: int = 4000) -> None:
    pair = sym_pair()
    result = train(pair, TrainConfig(steps=4000, optimizer="adam", lr=2e-3, batch_size=256,
                                      p_drop=0.0, seed=0),
                   width=32, depth=4, emb_dim=32)
    model = result.model
    print(f"trained {model.n_params} parameters, final loss {result.losses[-200:].mean():.4f}")
    labels = balanced_labels(n, pair.n_components)
    ref, ref_labels = pair.sample_data(n, seed=1)
    arms = {
        "unguided": None,
        "icg w=1.05": GuidanceConfig("icg", w_icg=1.05),
        "tsg w=2": GuidanceConfig("tsg", w_tsg=2.0, tsg=TsgSchedule("power", s=2.0, alpha=1.0)),
    }
    for name, g in arms.items():
        x = sample(model, g, SamplerConfig(steps=32, seed=0), n, labels=labels)
        r = evaluate(x, labels, ref, ref_labels, pair)
        print(f"{name:<11} frechet {r.frechet:.4f}  precision {r.precision:.4f}  "
              f"recall {r.recall:.4f}")


if __name__ == "__main__":
    main()
