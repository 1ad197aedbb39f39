#pragma once

// Umbrella header for the whole library.

#include "pix2seq/augment.hpp"
#include "pix2seq/checkpoint.hpp"
#include "pix2seq/codec.hpp"
#include "pix2seq/config.hpp"
#include "pix2seq/data.hpp"
#include "pix2seq/eval.hpp"
#include "pix2seq/figures.hpp"
#include "pix2seq/gradcheck.hpp"
#include "pix2seq/image.hpp"
#include "pix2seq/infer.hpp"
#include "pix2seq/model.hpp"
#include "pix2seq/nn.hpp"
#include "pix2seq/optim.hpp"
#include "pix2seq/pipeline.hpp"
#include "pix2seq/rng.hpp"
