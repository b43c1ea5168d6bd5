"""File-level encode/decode and the bitstream framing.

Bitstream layout (all integers big-endian):

    magic "MKC1" | version u8 | loss-type u8 | image h u16 | image w u16 |
    pad-h u8 | pad-w u8 | latent h u16 | latent w u16 | kept channels u16 |
    hyper payload length u32 | main payload length u32 | hyper payload |
    main payload

Kept-channel indices are never serialized: both ends derive them from the
gate scores in the shared model state.  The decoder likewise recomputes the
per-element entropy parameters from the decoded hyper latent, so coder
synchronization rests entirely on the determinism of the transforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import entropy as E
from .errors import DataError, ShapeError
from .model import ModelState, forward_eval, reconstruct
from .rangecoder import RangeDecoder, RangeEncoder, build_cdf

MAGIC = b"MKC1"
VERSION = 1
HEADER_FMT = ">4sBBHHBBHHHII"
HEADER_LEN = struct.calcsize(HEADER_FMT)  # 26 bytes

LOSS_FLAGS = {"mse": 0, "msssim": 1}

_CDF_CHUNK = 16384  # latent elements per table-building chunk


@dataclass(frozen=True)
class BitstreamHeader:
    loss_flag: int
    image_h: int
    image_w: int
    pad_h: int
    pad_w: int
    latent_h: int
    latent_w: int
    keep: int
    hyper_len: int
    main_len: int

    def pack(self) -> bytes:
        return struct.pack(HEADER_FMT, MAGIC, VERSION, self.loss_flag,
                           self.image_h, self.image_w, self.pad_h, self.pad_w,
                           self.latent_h, self.latent_w, self.keep,
                           self.hyper_len, self.main_len)

    @staticmethod
    def parse(blob: bytes) -> "BitstreamHeader":
        if len(blob) < HEADER_LEN:
            raise DataError(f"bitstream shorter than the {HEADER_LEN}-byte header")
        magic, version, loss_flag, ih, iw, ph, pw, lh, lw, keep, hlen, mlen = \
            struct.unpack(HEADER_FMT, blob[:HEADER_LEN])
        if magic != MAGIC:
            raise DataError(f"bad magic {magic!r}; not a maskcodec bitstream")
        if version != VERSION:
            raise DataError(f"unsupported bitstream version {version}")
        return BitstreamHeader(loss_flag=loss_flag, image_h=ih, image_w=iw,
                               pad_h=ph, pad_w=pw, latent_h=lh, latent_w=lw,
                               keep=keep, hyper_len=hlen, main_len=mlen)


def pad_image(x: np.ndarray, factor: int) -> tuple[np.ndarray, int, int]:
    """Edge-pad so both spatial dims divide `factor`; returns (padded, ph, pw)."""
    h, w = x.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return x, ph, pw


def _encode_hyper(z_hat: np.ndarray, state: ModelState) -> bytes:
    probs = E.logistic_alphabet_probs(state.prior)  # (cz, 511)
    cdf = build_cdf(probs)
    enc = RangeEncoder()
    flat = z_hat.reshape(-1, z_hat.shape[-1])
    for row in flat:
        for ch, sym in enumerate(row):
            s = int(sym) - E.SYMBOL_MIN
            table = cdf[ch]
            enc.encode(int(table[s]), int(table[s + 1]))
    return enc.finish()


def _decode_hyper(payload: bytes, shape: tuple, state: ModelState) -> np.ndarray:
    probs = E.logistic_alphabet_probs(state.prior)
    cdf = build_cdf(probs)
    dec = RangeDecoder(payload)
    hz, wz, cz = shape
    out = np.empty(hz * wz * cz, dtype=np.int32)
    pos = 0
    for _ in range(hz * wz):
        for ch in range(cz):
            table = cdf[ch]
            t = dec.target()
            s = int(np.searchsorted(table, t, side="right")) - 1
            dec.advance(int(table[s]), int(table[s + 1]))
            out[pos] = s + E.SYMBOL_MIN
            pos += 1
    return out.reshape(shape)


def _encode_main(y_hat: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> bytes:
    enc = RangeEncoder()
    syms = y_hat.reshape(-1) - E.SYMBOL_MIN
    mu_f = mu.reshape(-1)
    sg_f = sigma.reshape(-1)
    for start in range(0, syms.size, _CDF_CHUNK):
        stop = min(start + _CDF_CHUNK, syms.size)
        cdf = build_cdf(E.gaussian_alphabet_probs(mu_f[start:stop], sg_f[start:stop]))
        for i, s in enumerate(syms[start:stop]):
            table = cdf[i]
            enc.encode(int(table[s]), int(table[s + 1]))
    return enc.finish()


def _decode_main(payload: bytes, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    dec = RangeDecoder(payload)
    mu_f = mu.reshape(-1)
    sg_f = sigma.reshape(-1)
    out = np.empty(mu_f.size, dtype=np.int32)
    for start in range(0, mu_f.size, _CDF_CHUNK):
        stop = min(start + _CDF_CHUNK, mu_f.size)
        cdf = build_cdf(E.gaussian_alphabet_probs(mu_f[start:stop], sg_f[start:stop]))
        for i in range(stop - start):
            table = cdf[i]
            t = dec.target()
            s = int(np.searchsorted(table, t, side="right")) - 1
            dec.advance(int(table[s]), int(table[s + 1]))
            out[start + i] = s + E.SYMBOL_MIN
    return out.reshape(mu.shape)


def encode_image(x: np.ndarray, state: ModelState) -> bytes:
    """Image in [0, 1] (h, w, 3) to a complete decodable bitstream."""
    h, w = x.shape[:2]
    if h > 0xFFFF or w > 0xFFFF:
        raise ShapeError(f"image dims {h}x{w} exceed the u16 header fields")
    factor = state.config.transform.downsample
    padded, ph, pw = pad_image(np.asarray(x, dtype=np.float64), factor)
    fwd = forward_eval(padded, state)

    hyper_payload = _encode_hyper(fwd.z_hat, state)
    main_payload = _encode_main(fwd.y_hat, fwd.mu, fwd.sigma)
    loss_flag = LOSS_FLAGS.get(str(state.train_echo.get("loss", "mse")), 0)
    header = BitstreamHeader(
        loss_flag=loss_flag, image_h=h, image_w=w, pad_h=ph, pad_w=pw,
        latent_h=fwd.y_hat.shape[0], latent_w=fwd.y_hat.shape[1],
        keep=fwd.y_hat.shape[2], hyper_len=len(hyper_payload),
        main_len=len(main_payload))
    return header.pack() + hyper_payload + main_payload


def decode_image(blob: bytes, state: ModelState) -> np.ndarray:
    """Bitstream back to the reconstructed image; bit-equal to the encoder's own."""
    hdr = BitstreamHeader.parse(blob)
    if hdr.keep != state.config.keep:
        raise DataError(
            f"bitstream kept-channel count {hdr.keep} != model gate keep {state.config.keep}")
    body = blob[HEADER_LEN:]
    if len(body) < hdr.hyper_len + hdr.main_len:
        raise DataError(
            f"payload underrun: header promises {hdr.hyper_len + hdr.main_len} bytes, "
            f"got {len(body)}")
    hyper_payload = body[:hdr.hyper_len]
    main_payload = body[hdr.hyper_len:hdr.hyper_len + hdr.main_len]

    cfg = state.config.transform
    hz, wz = cfg.hyper_hw(hdr.latent_h, hdr.latent_w)
    z_hat = _decode_hyper(hyper_payload, (hz, wz, cfg.hyper_channels), state)

    from . import layers as L
    from .tensor import Tensor
    mu, sigma = L.hyper_synthesis_forward(Tensor(z_hat.astype(np.float64)), cfg,
                                          state.params, (hdr.latent_h, hdr.latent_w))
    y_hat = _decode_main(main_payload, mu.data, sigma.data)

    kept = state.gate.kept_channels()
    padded_hw = (hdr.image_h + hdr.pad_h, hdr.image_w + hdr.pad_w)
    xhat = reconstruct(y_hat, kept, state, padded_hw)
    return xhat[:hdr.image_h, :hdr.image_w]


def encoder_side_reconstruction(x: np.ndarray, state: ModelState) -> np.ndarray:
    """The reconstruction the encoder computes locally from its own quantized latents."""
    factor = state.config.transform.downsample
    padded, _, _ = pad_image(np.asarray(x, dtype=np.float64), factor)
    fwd = forward_eval(padded, state)
    xhat = reconstruct(fwd.y_hat, fwd.kept, state, padded.shape[:2])
    return xhat[:x.shape[0], :x.shape[1]]


def estimated_rate(x: np.ndarray, state: ModelState) -> E.RateSummary:
    """Model-side rate estimate for the quantized latents of `x` (source-pixel bpp)."""
    factor = state.config.transform.downsample
    padded, _, _ = pad_image(np.asarray(x, dtype=np.float64), factor)
    fwd = forward_eval(padded, state)
    p_y = E.gaussian_likelihood(fwd.y_hat, E.EntropyParams(mu=fwd.mu, sigma=fwd.sigma))
    p_z = E.factorized_likelihood(fwd.z_hat, state.prior)
    return E.rate_estimate(p_y, p_z, x.shape[0] * x.shape[1])


def evaluate_image(x: np.ndarray, state: ModelState) -> dict:
    """Encode, decode, and measure one image; returns an RD CSV row dict."""
    from .metrics import ms_ssim, psnr

    blob = encode_image(x, state)
    xhat = decode_image(blob, state)
    bpp = len(blob) * 8.0 / (x.shape[0] * x.shape[1])
    return {
        "bpp": bpp,
        "psnr": psnr(x, xhat),
        "msssim": ms_ssim(x, xhat),
        "bytes": len(blob),
        "xhat": xhat,
    }
