#pragma once

#include <string>

#include "frm/cost.hpp"
#include "frm/layers.hpp"

namespace frm {

// Consumes the concatenated multi-stage feature (stride 32) and returns a
// refined map of out_channels() at the same spatial size. FRM, PPM and DAPPM
// all implement this so the model can swap them freely.
template <typename T>
class ContextHead {
 public:
  virtual ~ContextHead() = default;

  virtual BasicTensor<T> forward(const BasicTensor<T>& concat, Mode mode) = 0;
  virtual std::size_t in_channels() const = 0;
  virtual std::size_t out_channels() const = 0;
  virtual const char* kind() const = 0;

  virtual void init_kaiming(Rng& rng) = 0;
  virtual void collect(ParameterSet<T>& out, const std::string& prefix) = 0;
  virtual Shape count_costs(CostCounter& costs, const std::string& path, const Shape& in) const = 0;
};

}  // namespace frm
