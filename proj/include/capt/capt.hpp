#pragma once

#include "capt/confusion_bank.hpp"
#include "capt/mgde.hpp"
#include "capt/numerics.hpp"
#include "capt/sample_miner.hpp"
#include "capt/semantic_miner.hpp"
#include "capt/trainer.hpp"
#include "capt/world.hpp"
