#ifndef SUBMTL_SUBMTL_HPP
#define SUBMTL_SUBMTL_HPP

#include "submtl/checkpoint.hpp"
#include "submtl/cohort.hpp"
#include "submtl/common.hpp"
#include "submtl/evaluation.hpp"
#include "submtl/kernels.hpp"
#include "submtl/loss.hpp"
#include "submtl/metrics.hpp"
#include "submtl/model.hpp"
#include "submtl/optim.hpp"
#include "submtl/parallel.hpp"
#include "submtl/synthetic.hpp"
#include "submtl/training.hpp"
#include "submtl/volume.hpp"

#endif  // SUBMTL_SUBMTL_HPP
