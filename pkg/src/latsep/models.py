"""Victim architectures: ResNet-20, VGG-16 and MobileNetV2 (32x32 variants).

Every model exposes ``features(x)`` returning the penultimate representation
(the linear classifier's input): 64-d for ResNet-20, 512-d for VGG-16,
1280-d for MobileNetV2.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

LATENT_DIMS = {"resnet20": 64, "vgg16": 512, "mobilenetv2": 1280}


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = out + self.shortcut(x)
        return F.relu(out)


class ResNet20(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        self.in_planes = 16
        self.conv1 = nn.Conv2d(3, 16, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.layer1 = self._make_layer(16, 3, stride=1)
        self.layer2 = self._make_layer(32, 3, stride=2)
        self.layer3 = self._make_layer(64, 3, stride=2)
        self.fc = nn.Linear(64, num_classes)
        self.latent_dim = 64

    def _make_layer(self, planes, blocks, stride):
        layers = []
        for s in [stride] + [1] * (blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer3(self.layer2(self.layer1(out)))
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


_VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


class VGG16(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        layers, in_ch = [], 3
        for v in _VGG16_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(in_ch, v, 3, padding=1, bias=False),
                           nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                in_ch = v
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(512, num_classes)
        self.latent_dim = 512

    def features(self, x):
        return self.body(x).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


class InvertedResidual(nn.Module):
    def __init__(self, in_ch, out_ch, expansion, stride):
        super().__init__()
        self.stride = stride
        hidden = in_ch * expansion
        self.use_res = stride == 1 and in_ch == out_ch
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden), nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch),
        )

    def forward(self, x):
        out = self.conv(x)
        return x + out if self.use_res else out


class MobileNetV2(nn.Module):
    # (expansion, out channels, blocks, stride); strides reduced for 32x32 input
    _CFG = [(1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2),
            (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]

    def __init__(self, num_classes=10):
        super().__init__()
        layers = [nn.Conv2d(3, 32, 3, stride=1, padding=1, bias=False),
                  nn.BatchNorm2d(32), nn.ReLU6(inplace=True)]
        in_ch = 32
        for exp, out_ch, blocks, stride in self._CFG:
            for s in [stride] + [1] * (blocks - 1):
                layers.append(InvertedResidual(in_ch, out_ch, exp, s))
                in_ch = out_ch
        layers += [nn.Conv2d(in_ch, 1280, 1, bias=False), nn.BatchNorm2d(1280), nn.ReLU6(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(1280, num_classes)
        self.latent_dim = 1280

    def features(self, x):
        out = self.body(x)
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


def build_model(architecture: str, num_classes: int) -> nn.Module:
    if architecture == "resnet20":
        return ResNet20(num_classes)
    if architecture == "vgg16":
        return VGG16(num_classes)
    if architecture == "mobilenetv2":
        return MobileNetV2(num_classes)
    raise ConfigError(f"unknown architecture '{architecture}'")


@torch.no_grad()
def predict_logits(model: nn.Module, images, batch_size: int = 256, device="cpu") -> torch.Tensor:
    """Forward a (N, H, W, C) float array in evaluation mode."""
    model.eval()
    x = torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2)
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(model(x[i:i + batch_size].to(device)).cpu())
    return torch.cat(outs)
