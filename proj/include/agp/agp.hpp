#pragma once

#include <agp/archive.hpp>
#include <agp/attention_mask.hpp>
#include <agp/data.hpp>
#include <agp/decoder.hpp>
#include <agp/encoder.hpp>
#include <agp/error.hpp>
#include <agp/experiment.hpp>
#include <agp/image_io.hpp>
#include <agp/metrics.hpp>
#include <agp/nn.hpp>
#include <agp/optim.hpp>
#include <agp/perturbation.hpp>
#include <agp/plot.hpp>
#include <agp/random.hpp>
#include <agp/scoring.hpp>
#include <agp/tensor.hpp>
#include <agp/training.hpp>
