"""Smoke test for the lreid extension: build it with `pip install --no-build-isolation crates/py`."""

import math
import sys
import tempfile
from pathlib import Path

import lreid

SMALL = """
seed = 3

[model.backbone]
embed_dim = 16
heads = 2
mlp_hidden = 32
patch_size = 32
image_depth = 1
text_depth = 1

[model.pfm]
n_heads = 2
mlp_hidden = 16

[model.decoder]
n_blocks = 1
n_heads = 2
mlp_hidden = 16

[train]
epochs = 1
batch_size = 16
"""


def main() -> int:
    assert lreid.NUM_ATTRIBUTES == len(lreid.ATTRIBUTE_NAMES) == 12
    assert abs(lreid.ce_loss([0.0, 0.0], 0) - math.log(2)) < 1e-12
    assert abs(lreid.orthogonal_loss([[1.0, 0.0], [0.0, 1.0]])) < 1e-12
    assert lreid.average_precision([False, True]) == 0.5
    try:
        lreid.ce_loss([0.0], 5)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range label accepted")

    flags = lreid.threshold_attributes([0.9] * 12)
    print("caption:", lreid.render_caption(flags))

    with tempfile.TemporaryDirectory() as tmp:
        stream = lreid.make_synth(tmp, domains=3, unseen=1, identities=6, images_per_identity=4, cameras=2)
        ckpts = lreid.train(stream, str(Path(tmp) / "run"), SMALL)
        assert len(ckpts) == 2, ckpts
        model = lreid.Model.load(ckpts[-1])
        global_reps, attr_reps = model.represent([0.5] * (3 * 256 * 128), [0.9] * 12)
        assert len(global_reps) == model.n_views and len(global_reps[0]) == model.dim
        assert attr_reps is not None
        report = lreid.evaluate(ckpts[-1], stream)
        assert len(report["datasets"]) == 3
        seen_map, _ = report["seen_avg"]
        assert 0.0 <= seen_map <= 1.0
        print(report["text"])
        try:
            lreid.Model.load(str(Path(tmp) / "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
