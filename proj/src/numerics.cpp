#include "journeykv/numerics.hpp"

namespace jkv {

Matrix block_diagonal(std::span<const Matrix> blocks) {
  Eigen::Index total = 0;
  for (const Matrix& b : blocks) {
    if (b.rows() != b.cols()) {
      throw DimensionError("block_diagonal: block " + shape_string(b) + " is not square");
    }
    total += b.rows();
  }
  Matrix out = Matrix::Zero(total, total);
  Eigen::Index offset = 0;
  for (const Matrix& b : blocks) {
    out.block(offset, offset, b.rows(), b.cols()) = b;
    offset += b.rows();
  }
  return out;
}

}  // namespace jkv
