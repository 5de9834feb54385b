#pragma once

// Every differentiable primitive with small input shapes, for the
// finite-difference checks in the unit and acceptance suites.

#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "rwl/tensor.hpp"

namespace rwl::testing {

struct PrimitiveCase {
  const char* name;
  std::vector<Shape> shapes;
  rwl::testing::Builder build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul", {{3, 4}, {4, 5}}, [](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); }});
  cases.push_back({"matmul_nt", {{3, 4}, {5, 4}}, [](Tape&, std::span<const Var> v) { return matmul_nt(v[0], v[1]); }});
  cases.push_back({"add", {{2, 3}, {2, 3}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }});
  cases.push_back({"add_row", {{3, 4}, {4}}, [](Tape&, std::span<const Var> v) { return add_row(v[0], v[1]); }});
  cases.push_back({"sub", {{5}, {5}}, [](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); }});
  cases.push_back({"mul", {{2, 3}, {2, 3}}, [](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); }});
  cases.push_back({"scale", {{4}}, [](Tape&, std::span<const Var> v) { return scale(v[0], -1.7); }});
  cases.push_back({"gelu", {{3, 3}}, [](Tape&, std::span<const Var> v) { return gelu(v[0]); }});
  cases.push_back({"layernorm", {{3, 6}, {6}, {6}},
                   [](Tape&, std::span<const Var> v) { return layernorm(v[0], v[1], v[2]); }});
  cases.push_back({"softmax", {{3, 5}}, [](Tape&, std::span<const Var> v) { return softmax(v[0]); }});
  cases.push_back({"logsumexp", {{3, 5}}, [](Tape&, std::span<const Var> v) { return logsumexp(v[0]); }});
  cases.push_back({"mean_over_axis0", {{4, 3}}, [](Tape&, std::span<const Var> v) { return mean_over_axis(v[0], 0); }});
  cases.push_back({"mean_over_axis1", {{4, 3}}, [](Tape&, std::span<const Var> v) { return mean_over_axis(v[0], 1); }});
  cases.push_back({"sum", {{2, 2}}, [](Tape&, std::span<const Var> v) { return sum(v[0]); }});
  cases.push_back({"dot", {{6}, {6}}, [](Tape&, std::span<const Var> v) { return dot(v[0], v[1]); }});
  cases.push_back({"cosine_similarity", {{5}, {5}},
                   [](Tape&, std::span<const Var> v) { return cosine_similarity(v[0], v[1]); }});
  cases.push_back({"dropout_fixed_mask", {{2, 4}}, [](Tape&, std::span<const Var> v) {
                     Tensor mask(Shape{2, 4}, {0.0, 1.25, 1.25, 0.0, 1.25, 1.25, 1.25, 0.0});
                     return dropout_with_mask(v[0], mask);
                   }});
  cases.push_back({"embedding_lookup", {{4, 3}}, [](Tape&, std::span<const Var> v) {
                     const std::size_t ids[] = {2, 0, 2, 3};
                     return embedding_lookup(v[0], ids);
                   }});
  cases.push_back({"strided_conv1d", {{10, 2}, {6, 3}, {3}},
                   [](Tape&, std::span<const Var> v) { return strided_conv1d(v[0], v[1], v[2], 3); }});
  cases.push_back({"cross_entropy", {{3, 4}}, [](Tape&, std::span<const Var> v) {
                     const std::size_t labels[] = {1, 3, 0};
                     return cross_entropy(v[0], labels);
                   }});
  cases.push_back({"slice_cols", {{3, 5}}, [](Tape&, std::span<const Var> v) { return slice_cols(v[0], 1, 3); }});
  cases.push_back({"concat_cols", {{2, 3}, {2, 1}}, [](Tape&, std::span<const Var> v) { return concat_cols(v); }});
  cases.push_back({"stack", {{3}, {3}}, [](Tape&, std::span<const Var> v) { return stack(v); }});
  cases.push_back({"index", {{4}}, [](Tape&, std::span<const Var> v) { return index(v[0], 2); }});
  cases.push_back({"mask_rows", {{4, 3}, {3}}, [](Tape&, std::span<const Var> v) {
                     return mask_rows(v[0], v[1], {false, true, true, false});
                   }});
  cases.push_back({"weighted_sum", {{2, 3}, {2, 3}, {2, 3}, {3}}, [](Tape&, std::span<const Var> v) {
                     return weighted_sum(v.first(3), softmax(v[3]));
                   }});
  return cases;
}

inline bool near_gelu_kink(const Tensor& t) {
  for (double v : t.data())
    if (std::abs(v) < 1e-3) return true;
  return false;
}

}  // namespace rwl::testing
