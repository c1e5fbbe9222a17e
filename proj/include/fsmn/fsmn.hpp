#pragma once

#include "fsmn/activation.hpp"
#include "fsmn/batch.hpp"
#include "fsmn/checkpoint.hpp"
#include "fsmn/errors.hpp"
#include "fsmn/lm_data.hpp"
#include "fsmn/matrix.hpp"
#include "fsmn/memory.hpp"
#include "fsmn/network.hpp"
#include "fsmn/random.hpp"
#include "fsmn/synthetic.hpp"
#include "fsmn/trainer.hpp"
#include "fsmn/zoo.hpp"
