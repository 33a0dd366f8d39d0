#pragma once

#include "lodestar/assignment.hpp"
#include "lodestar/baseline.hpp"
#include "lodestar/bench.hpp"
#include "lodestar/distill.hpp"
#include "lodestar/fft.hpp"
#include "lodestar/io.hpp"
#include "lodestar/ltsr.hpp"
#include "lodestar/neural.hpp"
#include "lodestar/report.hpp"
#include "lodestar/synth.hpp"
#include "lodestar/tensor.hpp"
#include "lodestar/track.hpp"
