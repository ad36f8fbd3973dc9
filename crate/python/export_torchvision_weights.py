"""Convert torchvision backbone weights into the safetensors layout the
Rust crate loads (torchvision tensor names, float32, no BN counters).

    python python/export_torchvision_weights.py --backbone wide_resnet50 --out weights/wide_resnet50.safetensors

With --random-seed the weights are freshly initialized instead of
downloaded, and --reference writes a probe input with torchvision's
eval-mode output next to them for the fidelity test.
"""

import argparse

import torch
import torchvision
from safetensors.torch import save_file

BUILDERS = {
    "wide_resnet50": (torchvision.models.wide_resnet50_2, "IMAGENET1K_V1"),
    "vgg16_bn": (torchvision.models.vgg16_bn, "IMAGENET1K_V1"),
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--backbone", choices=sorted(BUILDERS), required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--random-seed", type=int)
    parser.add_argument("--reference")
    parser.add_argument("--size", type=int, default=224)
    args = parser.parse_args()

    build, weights = BUILDERS[args.backbone]
    if args.random_seed is None:
        model = build(weights=weights)
    else:
        torch.manual_seed(args.random_seed)
        model = build(weights=None)
        # Non-trivial normalization statistics so the check covers them.
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.1, 0.1)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.1, 0.1)
    model.eval()

    state = {
        k: v.detach().float().contiguous()
        for k, v in model.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    save_file(state, args.out)
    params = sum(p.numel() for p in model.parameters())
    print(f"{args.backbone}: {len(state)} tensors, {params} parameters -> {args.out}")

    if args.reference:
        torch.manual_seed(1234)
        x = torch.randn(2, 3, args.size, args.size)
        with torch.no_grad():
            y = model(x)
        save_file({"input": x.contiguous(), "output": y.contiguous()}, args.reference)


if __name__ == "__main__":
    main()
