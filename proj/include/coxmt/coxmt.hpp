#pragma once

#include "coxmt/errors.hpp"
#include "coxmt/log.hpp"
#include "coxmt/autodiff.hpp"
#include "coxmt/optimizer.hpp"
#include "coxmt/data.hpp"
#include "coxmt/model.hpp"
#include "coxmt/loss.hpp"
#include "coxmt/metrics.hpp"
#include "coxmt/experiment.hpp"
