"""Network definitions shared by the defender, the attacker and the federation."""
import torch
from torch import nn


class Generator(nn.Module):
    """DCGAN-style generator producing (C, 32, 32) images in [-1, 1].

    With ``num_classes`` set, the label is embedded and concatenated to z.
    """

    def __init__(self, noise_dim=64, channels=1, num_classes=None, width=64, label_dim=16):
        super().__init__()
        self.noise_dim = noise_dim
        self.channels = channels
        self.num_classes = num_classes
        in_dim = noise_dim
        if num_classes is not None:
            self.embed = nn.Embedding(num_classes, label_dim)
            in_dim += label_dim
        self.fc = nn.Sequential(
            nn.Linear(in_dim, width * 4 * 4 * 4, bias=False),
            nn.BatchNorm1d(width * 4 * 4 * 4),
            nn.ReLU(True),
        )
        self.width = width
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(width * 4, width * 2, 4, 2, 1, bias=False),  # 8x8
            nn.BatchNorm2d(width * 2),
            nn.ReLU(True),
            nn.ConvTranspose2d(width * 2, width, 4, 2, 1, bias=False),  # 16x16
            nn.BatchNorm2d(width),
            nn.ReLU(True),
            nn.ConvTranspose2d(width, channels, 4, 2, 1),  # 32x32
            nn.Tanh(),
        )

    def forward(self, z, labels=None):
        if self.num_classes is not None:
            z = torch.cat([z, self.embed(labels)], dim=1)
        h = self.fc(z).view(-1, self.width * 4, 4, 4)
        return self.deconv(h)


class Discriminator(nn.Module):
    """Convolutional discriminator returning one logit per input.

    Works on images (C x 32 x 32) or on feature maps (64 x 16 x 16). A
    conditional discriminator appends one learned label plane to the input.
    ``prob`` gives the probability that the input is real.
    """

    def __init__(self, in_channels, size, num_classes=None, width=64, batchnorm=True):
        super().__init__()
        self.size = size
        self.num_classes = num_classes
        if num_classes is not None:
            self.embed = nn.Embedding(num_classes, size * size)
            in_channels += 1
        layers = []
        ch = in_channels
        out = width
        while size > 4:
            norm = batchnorm and bool(layers)  # no normalization on the input layer
            layers.append(nn.Conv2d(ch, out, 4, 2, 1, bias=not norm))
            if norm:
                layers.append(nn.BatchNorm2d(out))
            layers.append(nn.LeakyReLU(0.2, True))
            ch, out, size = out, out * 2, size // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch * 4 * 4, 1)

    def forward(self, x, labels=None):
        if self.num_classes is not None:
            plane = self.embed(labels).view(-1, 1, self.size, self.size)
            x = torch.cat([x, plane], dim=1)
        return self.head(self.features(x).flatten(1)).squeeze(1)

    def prob(self, x, labels=None):
        return torch.sigmoid(self.forward(x, labels))


class Classifier(nn.Module):
    """Small CNN used as the federated model: two conv blocks, two dense layers."""

    def __init__(self, channels=1, num_classes=10, width=32, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(width * 2 * 8 * 8, hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x):
        return self.net(x)
