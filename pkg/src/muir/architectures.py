"""Layer lists for the three cross-domain architectures.

Only shapes are described here; nothing is trained. The first and last layer
of each list are the unshared adapters.
"""
from __future__ import annotations

from .decomposition import LayerSpec


def wide_resnet(depth: int = 40, width: int = 1, shortcut_kernel: int = 3) -> list[LayerSpec]:
    """WideResNet conv layers plus the input conv and output dense layer.

    ``shortcut_kernel`` sets the extent of the projection convs used where a
    group changes channel count. With 3 the reparameterizable block count of
    WRN-40-1 at 16x16 is 2268; 1x1 projections give 2188.
    """
    if (depth - 4) % 6:
        raise ValueError("WideResNet depth must be 6N + 4")
    n_blocks = (depth - 4) // 6
    widths = [16 * width, 32 * width, 64 * width]
    layers = [LayerSpec("conv_in", "conv2d", 3, 16, (3, 3))]
    in_ch = 16
    for g, w in enumerate(widths):
        for b in range(n_blocks):
            layers.append(LayerSpec(f"g{g}b{b}_conv1", "conv2d", in_ch, w, (3, 3)))
            layers.append(LayerSpec(f"g{g}b{b}_conv2", "conv2d", w, w, (3, 3)))
            if in_ch != w:
                k = (shortcut_kernel, shortcut_kernel)
                layers.append(LayerSpec(f"g{g}b{b}_shortcut", "conv2d", in_ch, w, k))
            in_ch = w
    layers.append(LayerSpec("fc_out", "dense", in_ch, 10))
    return layers


def stacked_lstm(hidden: int = 256, n_layers: int = 2, vocab: int = 33278) -> list[LayerSpec]:
    layers = [LayerSpec("embedding", "dense", vocab, hidden)]
    for i in range(n_layers):
        layers.append(LayerSpec(f"lstm{i}", "lstm", hidden, hidden))
    layers.append(LayerSpec("decoder", "dense", hidden, vocab))
    return layers


def deepbind(channels: int = 256, kernel: int = 24, hidden: int = 256) -> list[LayerSpec]:
    return [
        LayerSpec("embed", "conv1d", 4, channels, (1,)),
        LayerSpec("conv", "conv1d", channels, channels, (kernel,)),
        LayerSpec("fc", "dense", channels, hidden),
        LayerSpec("out", "dense", hidden, 1),
    ]


BUILTIN = {
    "wrn-40-1": wide_resnet,
    "stacked-lstm-256": stacked_lstm,
    "deepbind-256": deepbind,
}


def builtin(name: str) -> list[LayerSpec]:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown builtin architecture {name!r}; choose from {sorted(BUILTIN)}") from None
