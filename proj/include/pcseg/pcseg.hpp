#pragma once

#include "pcseg/autodiff.hpp"
#include "pcseg/checkpoint.hpp"
#include "pcseg/common.hpp"
#include "pcseg/config.hpp"
#include "pcseg/gradcheck.hpp"
#include "pcseg/io.hpp"
#include "pcseg/kdtree.hpp"
#include "pcseg/metrics.hpp"
#include "pcseg/model.hpp"
#include "pcseg/parallel.hpp"
#include "pcseg/pointcloud.hpp"
#include "pcseg/preprocess.hpp"
#include "pcseg/projection.hpp"
#include "pcseg/rng.hpp"
#include "pcseg/tensor.hpp"
#include "pcseg/toydata.hpp"
#include "pcseg/train.hpp"
