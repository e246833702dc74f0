#pragma once

#include "kduda/autodiff.hpp"
#include "kduda/data.hpp"
#include "kduda/errors.hpp"
#include "kduda/harness.hpp"
#include "kduda/losses.hpp"
#include "kduda/models.hpp"
#include "kduda/trainer.hpp"
