#pragma once

// Dense float32 tensors (rank 1 or 2 everywhere in this project) with an
// optional gradient buffer. Shapes are explicit and checked at op boundaries.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coffee {

struct Error : std::runtime_error {
  enum class Kind {
    shape,       // operand shapes incompatible with the op
    numeric,     // NaN/Inf produced or consumed
    vocab,       // unknown token / bad vocabulary
    config,      // invalid or unknown configuration
    contract,    // precondition violated (missing refs, bad sizes, ...)
    io,          // file missing / unreadable / truncated
    version,     // checkpoint format version mismatch
    fingerprint  // checkpoint belongs to a different config
  };
  Kind kind;
  Error(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty means "no gradient accumulated yet"

  Tensor() = default;
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    validate();
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(size_t(shape_numel(t.shape)), 0.0f);
    t.validate();
    return t;
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  int64_t numel() const { return shape_numel(shape); }
  int rank() const { return int(shape.size()); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return rank() == 2 ? shape[1] : 1; }

  void validate() const {
    if (shape.empty()) throw Error(Error::Kind::shape, "tensor shape must be non-empty");
    for (int64_t d : shape)
      if (d <= 0)
        throw Error(Error::Kind::shape, "tensor dims must be positive, got " + shape_str(shape));
    if (int64_t(data.size()) != shape_numel(shape))
      throw Error(Error::Kind::shape,
                  "data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() { grad.assign(data.size(), 0.0f); }
  bool has_grad() const { return !grad.empty(); }
};

inline void check_finite(const float* p, size_t n, const std::string& where) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i]))
      throw Error(Error::Kind::numeric,
                  where + ": non-finite value at flat index " + std::to_string(i));
}

inline void check_finite(const Tensor& t, const std::string& where) {
  check_finite(t.data.data(), t.data.size(), where);
}

}  // namespace coffee
