"""A scaled-down benchmark that runs in about a minute on one core."""

from retrocast.pipeline import PipelineConfig


def demo_config(seed=0):
    c = PipelineConfig().to_dict()
    for d in c["data"]["domains"]:
        d["length"] = 6000
    c["seed"] = seed
    c["backbone"].update(sl=256, fl=48, patch_len=32, d=8, epochs=10, stride=61)
    c["kb"]["per_domain_quota"] = 120
    c["pairs"].update(n_train=200, train_stride=97, test_stride=150)
    c["train"]["seed"] = seed
    return PipelineConfig.from_dict(c)
