#pragma once

#include "seqshort/autodiff.hpp"
#include "seqshort/checkpoint.hpp"
#include "seqshort/data.hpp"
#include "seqshort/encoder.hpp"
#include "seqshort/errors.hpp"
#include "seqshort/explain.hpp"
#include "seqshort/ops.hpp"
#include "seqshort/parameter.hpp"
#include "seqshort/profiler.hpp"
#include "seqshort/seqshort_layer.hpp"
#include "seqshort/tensor.hpp"
#include "seqshort/training.hpp"
