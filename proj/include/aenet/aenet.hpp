#pragma once

#include "aenet/tensor.hpp"
#include "aenet/autodiff.hpp"
#include "aenet/ops.hpp"
#include "aenet/nn.hpp"
#include "aenet/tio.hpp"
#include "aenet/synth.hpp"
#include "aenet/prior.hpp"
#include "aenet/ae.hpp"
#include "aenet/xattn.hpp"
#include "aenet/losses.hpp"
#include "aenet/stats.hpp"
#include "aenet/trainer.hpp"
#include "aenet/io.hpp"
#include "aenet/gradcheck.hpp"
