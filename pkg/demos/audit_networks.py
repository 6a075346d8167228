"""Print the layer tables and parameter accounting for all four networks.

    python demos/audit_networks.py

Also shows how one image moves through the pyramid and the fused feature map,
which is the shape contract the heads depend on.
"""

import numpy as np

from pixeldamage import Network, RngState, count_parameters
from pixeldamage.architectures import ARCHS, ROLES
from pixeldamage.layers import softmax_per_pixel
from pixeldamage.multiscale import build_pyramid


def main():
    for arch in ARCHS:
        for role in ROLES:
            net = Network.build(arch, role, RngState(0))
            print(f"== {arch} / {role}")
            print("\n".join(count_parameters(net.spec, net.params).lines()))
            print()

    image = np.random.default_rng(0).uniform(0, 255, (1, 3, 96, 96)).astype(np.float32)
    pyr = build_pyramid(image)
    print("pyramid levels:", [lvl.shape[-2:] for lvl in pyr.levels])
    net = Network.build("resnet23", "classifier", RngState(0))
    logits = net.forward(image / 255.0)
    probs = softmax_per_pixel(logits)
    print("classifier logits:", logits.shape, " softmax sums to 1:", bool(np.allclose(probs.sum(axis=1), 1, atol=1e-5)))


if __name__ == "__main__":
    main()
