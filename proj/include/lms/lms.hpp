#pragma once

#include "lms/array.hpp"
#include "lms/autodiff.hpp"
#include "lms/bundle.hpp"
#include "lms/cg.hpp"
#include "lms/decoder.hpp"
#include "lms/encoding.hpp"
#include "lms/errors.hpp"
#include "lms/experiment.hpp"
#include "lms/fft.hpp"
#include "lms/image_step.hpp"
#include "lms/io.hpp"
#include "lms/linear_operator.hpp"
#include "lms/mala.hpp"
#include "lms/metrics.hpp"
#include "lms/noise.hpp"
#include "lms/pattern.hpp"
#include "lms/phantom.hpp"
#include "lms/posterior.hpp"
#include "lms/prior.hpp"
#include "lms/random.hpp"
#include "lms/vae.hpp"
