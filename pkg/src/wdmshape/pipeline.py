"""End-to-end simulation: shaped/coded transmitter, WDM fiber link and receiver chain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .air import LN2, TrainingPairs, fit_aux_model
from .channels import LinkConfig, OpticalField, channel_select, ssfm_propagate, wdm_assemble
from .constellation import ConstellationPmf
from .dsp import (FrameConfig, ImpairmentConfig, PhaseTrackerConfig, SymbolFrame, apply_carrier_impairments,
                  build_frame, cd_compensate, cma_equalize, frame_sync, freq_offset_correct, matched_filter,
                  phase_track, pilot_align, pilot_derotate, quantize, rrc_shape, snr_estimate,
                  wiener_variance_from_pilots)
from .labeling import LabelingTable, map_bits, named_labeling
from .shaping import derive_seed
from .turbo import FecConfig, TurboCodec, bicm_loop

log = logging.getLogger(__name__)


def dbm_to_watt(p_dbm: float) -> float:
    return 1e-3 * 10 ** (p_dbm / 10)


# --- memoryless sampler for the PMF optimizer ---------------------------------------

def fiber_sampler(link: LinkConfig, power_dbm: float, *, n_spans=None, pols=(0,), single_precision=True):
    """Channel sampler ``(pmf, n, seed) -> TrainingPairs`` over the WDM link.

    Every channel and polarization carries i.i.d. symbols from ``pmf``; the
    central channel is demultiplexed, dispersion-compensated, matched
    filtered and sampled at the symbol instants.  Outputs are divided by the
    launch amplitude so they share the PMF's normalised units.
    """
    sps = link.simulation_sps()
    spans = link.n_spans if n_spans is None else n_spans
    amp = np.sqrt(dbm_to_watt(power_dbm) / 2)  # per polarization
    dt = np.complex64 if single_precision else np.complex128

    def sampler(pmf: ConstellationPmf, n: int, seed) -> TrainingPairs:
        rng = np.random.default_rng(derive_seed(seed, "tx"))
        idx = [pmf.sample(2 * n, rng).reshape(2, n) for _ in range(link.n_channels)]
        waves = [rrc_shape(pmf.scaled_points[i].astype(dt) * amp, link.rolloff, sps) for i in idx]
        fld = wdm_assemble(waves, link, sps * link.symbol_rate)
        fld.samples = fld.samples.astype(dt)
        out = ssfm_propagate(fld, link, derive_seed(seed, "ase"), n_spans=spans)
        y = _demod_symbols(out, link, spans, sps_rx=2) / amp
        c = link.n_channels // 2
        x = np.concatenate([pmf.scaled_points[idx[c][p]] for p in pols])
        yy = np.concatenate([y[p] for p in pols])
        ii = np.concatenate([idx[c][p] for p in pols])
        return TrainingPairs(x, yy, ii)

    return sampler


def _demod_symbols(fld: OpticalField, link: LinkConfig, n_spans: int, sps_rx: int = 2) -> np.ndarray:
    c = link.n_channels // 2
    r = channel_select(fld, c, link, sps_out=sps_rx)
    r = cd_compensate(r, sps_rx * link.symbol_rate, link, n_spans * link.span_length_km)
    r = matched_filter(r, link.rolloff, sps_rx)
    return np.asarray(r[:, ::sps_rx], dtype=np.complex128)


def awgn_sampler(snr_db: float):
    """Memoryless AWGN sampler in normalised units (unit-power reference)."""

    def sampler(pmf: ConstellationPmf, n: int, seed) -> TrainingPairs:
        from .channels import awgn_apply

        rng = np.random.default_rng(derive_seed(seed, "tx"))
        idx = pmf.sample(n, rng)
        x = pmf.scaled_points[idx]
        return TrainingPairs(x, awgn_apply(x, snr_db, derive_seed(seed, "noise")), idx)

    return sampler


# --- coded transmission ------------------------------------------------------------

@dataclass
class SystemSetup:
    """Everything static about one transmitted format."""

    name: str
    labeling: LabelingTable
    pmf: ConstellationPmf
    codec: TurboCodec
    frame: FrameConfig

    @classmethod
    def build(cls, labeling_name: str, eta: float, frame: FrameConfig, decoder_iters=10, demap_iters=5,
              interleaver_seed=0, max_log=False, table: LabelingTable | None = None):
        """``labeling_name`` names a built-in labeling unless ``table`` is given."""
        tab = named_labeling(labeling_name) if table is None else table
        fec = FecConfig(eta, tab.m, frame.payload_per_block, decoder_iters, demap_iters, interleaver_seed,
                        max_log)
        codec = TurboCodec(fec, tab.position_order())
        return cls(labeling_name, tab, tab.pmf(), codec, frame)


@dataclass
class TxState:
    frame: SymbolFrame
    info: np.ndarray  # (n_pol, n_blocks, K)
    coded: np.ndarray  # (n_pol, n_blocks, payload * m) label order
    sym_index: np.ndarray  # (n_pol, n_payload)


def make_central_tx(setup: SystemSetup, rng_seed) -> TxState:
    """Random info bits, turbo encoding, many-to-one mapping, framing (both pols)."""
    rng = np.random.default_rng(derive_seed(rng_seed, "bits"))
    f = setup.frame
    k = setup.codec.config.n_info
    info = rng.integers(0, 2, (2, f.n_blocks, k), dtype=np.uint8)
    coded = np.stack([[setup.codec.encode(info[p, b]) for b in range(f.n_blocks)] for p in range(2)])
    idx = np.stack([map_bits(coded[p].ravel(), setup.labeling) for p in range(2)])
    payload = setup.pmf.scaled_points[idx]
    frame = build_frame(payload, f, derive_seed(rng_seed, "frame"))
    return TxState(frame, info, coded, idx)


def make_interferer(pmf: ConstellationPmf, f: FrameConfig, rng_seed) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(rng_seed, "bits"))
    idx = pmf.sample(2 * f.n_blocks * f.payload_per_block, rng).reshape(2, -1)
    return build_frame(pmf.scaled_points[idx], f, derive_seed(rng_seed, "frame")).symbols


def launch(central: np.ndarray, interferers: list, link: LinkConfig, power_dbm: float,
           single_precision=True) -> OpticalField:
    """Pulse-shape all channels at the simulation rate and multiplex them."""
    sps = link.simulation_sps()
    amp = np.sqrt(dbm_to_watt(power_dbm) / 2)  # per polarization
    dt = np.complex64 if single_precision else np.complex128
    chans = list(interferers)
    chans.insert(link.n_channels // 2, central)
    waves = [rrc_shape(np.asarray(s, dt) * amp, link.rolloff, sps) for s in chans]
    fld = wdm_assemble(waves, link, sps * link.symbol_rate)
    fld.samples = fld.samples.astype(dt)
    return fld


# --- receiver ----------------------------------------------------------------------

@dataclass
class RxResult:
    snr_db: float
    air: float
    input_entropy: float
    pre_fec_errors: int = 0
    pre_fec_bits: int = 0
    post_fec_errors: int = 0
    post_fec_bits: int = 0
    post_fec_errors_noniter: int = 0
    fo_estimate_hz: float = 0.0
    wiener_variance: float = 0.0
    decoded: bool = False
    flags: list = field(default_factory=list)
    mi_trajectory: list = field(default_factory=list)
    blocks: list = field(default_factory=list)  # raw per (pol, block) counts

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["pre_fec_ber"] = self.pre_fec_errors / self.pre_fec_bits if self.pre_fec_bits else None
        d["post_fec_ber"] = self.post_fec_errors / self.post_fec_bits if self.post_fec_bits else None
        return d


def receive(fld: OpticalField, link: LinkConfig, distance_km: float, setup: SystemSetup, tx: TxState,
            impair: ImpairmentConfig, rng_seed, *, tracker: PhaseTrackerConfig | None = None,
            decode=True, demap_iters=None) -> RxResult:
    """Central-channel receiver: demux, impairments, ADC, CD compensation, sync,
    frequency-offset removal, pilot CMA, phase tracking, AIR and decoding."""
    f = setup.frame
    fr = tx.frame
    rs = link.symbol_rate
    flags = []
    r = channel_select(fld, link.n_channels // 2, link, sps_out=2)
    rng = np.random.default_rng(derive_seed(rng_seed, "rx-impair"))
    r = apply_carrier_impairments(r, 2 * rs, impair, rng)
    if impair.adc_bits:
        r = quantize(r, impair.adc_bits)
    r = cd_compensate(r, 2 * rs, link, distance_km)
    r = matched_filter(r, link.rolloff, 2)
    r = r / np.sqrt(np.mean(np.abs(r) ** 2, axis=1, keepdims=True))

    off = frame_sync(r, fr.preamble, sps=2, symbol_rate=rs, max_offset_hz=2 * impair.frequency_offset)
    r = np.roll(r, -(off - 2 * f.guard_symbols), axis=1)
    r, fo = freq_offset_correct(r, 2, rs, fr.pilot_index, fr.pilot_values)
    if fo.at_boundary:
        flags.append("frequency-offset estimate at grid boundary")
    y, _ = cma_equalize(r, fr.pilot_index)
    y = pilot_align(y, fr.pilot_index, fr.pilot_values)
    yd = pilot_derotate(y, fr.pilot_index, fr.pilot_values)

    # data-aided auxiliary model over all payload symbols of both polarizations
    pmf = setup.pmf
    xi = tx.sym_index
    pairs = TrainingPairs(pmf.scaled_points[xi].ravel(), yd[:, fr.data_index].ravel(), xi.ravel())
    model = fit_aux_model(pairs, pmf)
    noise_var = float(np.dot(pmf.probabilities, np.trace(model.covs, axis1=1, axis2=2)))
    wv = wiener_variance_from_pilots(y, fr.pilot_index, fr.pilot_values, noise_var)
    tcfg = tracker or PhaseTrackerConfig()
    window = tcfg.window_rad
    if wv > (2 * window / tcfg.grid_size) ** 2:
        # widen the phase window so one grid cell still spans a Wiener step
        window = 0.5 * tcfg.grid_size * np.sqrt(wv) * 1.001
        flags.append(f"phase window widened to {window:.3g} rad for Wiener variance {wv:.3g}")
    tcfg = PhaseTrackerConfig(wv, tcfg.grid_size, window, tcfg.neighbours, tcfg.posterior_floor)
    snr = snr_estimate(pairs.x, pairs.y)

    res = RxResult(snr.snr_db, 0.0, pmf.entropy(), fo_estimate_hz=fo.offset_hz, wiener_variance=wv, flags=flags)
    cond = []
    for p in range(2):
        for b, (dpos, ppos) in enumerate(fr.block_slices()):
            lo = f.data_start + b * f.block_symbols
            seg = yd[p, lo: lo + f.block_symbols]
            is_pil = np.zeros(f.block_symbols, bool)
            is_pil[ppos - lo] = True
            pv = fr.pilot_values[p, np.searchsorted(fr.pilot_index, ppos)]
            sl = slice(b * f.payload_per_block, (b + 1) * f.payload_per_block)
            lp, h = phase_track(seg, pmf, model, tcfg, is_pil, pv, noise_var, xi[p, sl])
            cond.append(h)
            blk = {"pol": p, "block": b, "cond_entropy": h}
            if decode:
                out = bicm_loop(lp, setup.labeling, setup.codec, demap_iters, tx.coded[p, b])
                blk.update(
                    post_fec_errors=int(np.sum(out.info_bits != tx.info[p, b])),
                    post_fec_errors_noniter=int(np.sum(out.passes[0]["info_bits"] != tx.info[p, b])),
                    post_fec_bits=int(tx.info[p, b].size),
                    pre_fec_errors=int(np.sum(out.passes[0]["demap_hard"] != tx.coded[p, b])),
                    pre_fec_bits=int(tx.coded[p, b].size),
                    passes=len(out.passes),
                )
                for key in ("post_fec_errors", "post_fec_errors_noniter", "post_fec_bits", "pre_fec_errors",
                            "pre_fec_bits"):
                    setattr(res, key, getattr(res, key) + blk[key])
                res.mi_trajectory.append([(q["mi_demap"], q["mi_decoder"]) for q in out.passes])
            res.blocks.append(blk)
    res.air = max(0.0, pmf.entropy() - float(np.mean(cond)))
    res.decoded = decode
    return res


def propagate_with_taps(fld: OpticalField, link: LinkConfig, max_spans: int, rng_seed, callback):
    """Propagate once and invoke ``callback(n_spans, field)`` after every span."""
    ssfm_propagate(fld, link, rng_seed, n_spans=max_spans, tap=lambda i, f: callback(i + 1, f))


__all__ = ["fiber_sampler", "awgn_sampler", "SystemSetup", "make_central_tx", "make_interferer", "launch",
           "receive", "RxResult", "propagate_with_taps", "dbm_to_watt", "LN2"]
