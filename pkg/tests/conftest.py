import dataclasses

import pytest
import torch

torch.set_num_threads(1)

from slotworld.model import ModelConfig, build_model


def micro_config(k_slots=2, image_size=8, variant="symmetric") -> ModelConfig:
    """Tiny widths for fast gradient and property tests."""
    return ModelConfig(
        image_size=image_size, k_slots=k_slots, det_size=4, sto_size=4,
        variant=variant, decoder_channels=4, refine_channels=4, refine_pool=4,
        refine_mlp=8, refine_lstm=8, dyn_core=8, dyn_action=4, dyn_act_eff=8,
        dyn_act_att=8, dyn_obj_eff=8, dyn_obj_att=8, dyn_comb=8)


@pytest.fixture
def micro_model():
    torch.manual_seed(0)
    return build_model(micro_config())


@pytest.fixture
def micro_model_f64():
    torch.manual_seed(0)
    return build_model(micro_config()).double()


@pytest.fixture
def desk_model():
    torch.manual_seed(0)
    return build_model(ModelConfig.desk())


def replace_cfg(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
