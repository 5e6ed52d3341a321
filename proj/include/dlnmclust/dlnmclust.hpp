#pragma once

#include "dlnmclust/numeric.hpp"
#include "dlnmclust/spline_basis.hpp"
#include "dlnmclust/spatial_graph.hpp"
#include "dlnmclust/model.hpp"
#include "dlnmclust/mcmc.hpp"
#include "dlnmclust/relabel.hpp"
#include "dlnmclust/kmeans.hpp"
#include "dlnmclust/sampler.hpp"
#include "dlnmclust/inference.hpp"
#include "dlnmclust/simulator.hpp"
#include "dlnmclust/io.hpp"
