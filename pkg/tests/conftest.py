import pytest

from pmdiag import evaluation, model, preprocess, synth
from pmdiag.core import FaultClass, TechnologyProfile


MJ_COUNTS = {
    FaultClass.Nominal: 356,
    FaultClass.Obstacle: 274,
    FaultClass.Friction: 355,
    FaultClass.PowerSupply: 125,
}


@pytest.fixture(scope="session")
def mj_profile():
    return synth.DEFAULT_PROFILES["MJ"]


@pytest.fixture(scope="session")
def clean_cfg(mj_profile):
    """Noiseless, jitterless MJ-like config: exact construction values."""
    return synth.SynthConfig(profile=mj_profile)


@pytest.fixture(scope="session")
def noisy_cfg(mj_profile):
    return synth.SynthConfig(
        profile=mj_profile, noise_sigma=0.09, amplitude_jitter=0.05, duration_jitter=0.05
    )


def profile_at_rate(profile: TechnologyProfile, sample_rate: float) -> TechnologyProfile:
    return TechnologyProfile(
        profile.name,
        profile.supply,
        sample_rate,
        profile.nominal_peak_amps,
        profile.plateau_amps,
        profile.move_duration,
    )


@pytest.fixture(scope="session")
def small_run(mj_profile):
    """Small trained pipeline shared by conformal and evaluation tests.

    All five classes present so APS scores can reach 1.0.
    """
    counts = {
        FaultClass.Nominal: 60,
        FaultClass.Obstacle: 45,
        FaultClass.Friction: 45,
        FaultClass.PowerSupply: 40,
        FaultClass.Misalignment: 30,
    }
    cfg = synth.SynthConfig(
        profile=mj_profile, noise_sigma=0.09, amplitude_jitter=0.05, duration_jitter=0.05, seed=5
    )
    ds = synth.generate_dataset(counts, cfg, (0.3, 1.0))
    pcfg = preprocess.PreprocessConfig()
    features = {m.id: (preprocess.preprocess(m, pcfg), m.label) for m in ds}
    spec = evaluation.SplitSpec(seed=5)
    train_ds, test_ds = evaluation.stratified_split(ds, spec)
    cal_ds, hold_ds = evaluation.split_calibration(test_ds, spec)
    weights = model.weight_vector(model.class_weights(train_ds.class_counts()))
    result = model.train(
        [features[m.id] for m in train_ds],
        model.TrainConfig(epochs=80, seed=5, class_weights=weights),
    )
    return {
        "cfg": cfg,
        "dataset": ds,
        "features": features,
        "train": train_ds,
        "test": test_ds,
        "calibration": cal_ds,
        "holdout": hold_ds,
        "model": result.model,
        "losses": result.epoch_losses,
    }
