#include "journeykv/autodiff.hpp"

#include <cmath>
#include <numbers>

namespace jkv::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw DimensionError("Var::scalar on non-scalar " + shape_string(v));
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (g.rows() != node.value.rows() || g.cols() != node.value.cols()) {
    throw DimensionError("accumulate: gradient " + shape_string(g) + " for value " +
                         shape_string(node.value));
  }
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

Matrix Tape::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw DimensionError("backward: root must be scalar, got " + shape_string(root.value()));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.size() == 0) continue;
    const Matrix g = node.grad;
    node.backward(*this, g);
  }
}

namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.value()) + " and " +
                         shape_string(b.value()));
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("autodiff op on an empty Var");
  return a.tape();
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  return tape_of(a).record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  return tape_of(a).record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape("hadamard", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double factor) {
  return tape_of(a).record(a.value() * factor, {a}, [a, factor](Tape& t, const Matrix& g) {
    t.accumulate(a, g * factor);
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: " + shape_string(a.value()) + " and row " +
                         shape_string(row.value()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var add_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("add_col: " + shape_string(a.value()) + " and col " +
                         shape_string(col.value()));
  }
  Matrix out = a.value();
  out.colwise() += col.value().col(0);
  return tape_of(a).record(std::move(out), {a, col}, [a, col](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(col)) t.accumulate(col, g.rowwise().sum());
  });
}

Var matmul(Var a, Var b) {
  Matrix out = jkv::matmul(a.value(), b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_string(a.value()) + " and " +
                         shape_string(b.value()) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value());
    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
  });
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.transpose());
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  Matrix cached = out;
  return tape_of(a).record(std::move(out), {a}, [a, cached](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() * (1.0 - cached.array().square())).matrix());
  });
}

Var gelu(Var a) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  static constexpr double k = 0.044715;
  const Matrix& x = a.value();
  Matrix inner = (c * (x.array() + k * x.array().cube())).matrix();
  Matrix th = inner.array().tanh().matrix();
  Matrix out = (0.5 * x.array() * (1.0 + th.array())).matrix();
  return tape_of(a).record(std::move(out), {a}, [a, th](Tape& t, const Matrix& g) {
    const Matrix& x = a.value();
    auto d = 0.5 * (1.0 + th.array()) +
             0.5 * x.array() * (1.0 - th.array().square()) * c *
                 (1.0 + 3.0 * k * x.array().square());
    t.accumulate(a, (g.array() * d).matrix());
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") outside " + shape_string(a.value()));
  }
  Matrix out = a.value().middleRows(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") outside " + shape_string(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts[0].rows()) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts, [owned](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : owned) {
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != parts[0].cols()) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), parts, [owned](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : owned) {
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

Var gather_rows(Var a, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                           shape_string(a.value()));
    }
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, full);
  });
}

Var gather_pairs(Var table, std::span<const Eigen::Index> row_ids,
                 std::span<const Eigen::Index> col_ids) {
  const auto n = static_cast<Eigen::Index>(row_ids.size());
  const auto m = static_cast<Eigen::Index>(col_ids.size());
  for (auto r : row_ids)
    if (r < 0 || r >= table.rows()) throw DimensionError("gather_pairs: row id out of range");
  for (auto c : col_ids)
    if (c < 0 || c >= table.cols()) throw DimensionError("gather_pairs: col id out of range");
  Matrix out(n, m);
  const Matrix& tv = table.value();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) out(i, j) = tv(row_ids[i], col_ids[j]);
  std::vector<Eigen::Index> ri(row_ids.begin(), row_ids.end());
  std::vector<Eigen::Index> ci(col_ids.begin(), col_ids.end());
  return tape_of(table).record(std::move(out), {table}, [table, ri, ci](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ri.size(); ++i)
      for (std::size_t j = 0; j < ci.size(); ++j)
        full(ri[i], ci[j]) += g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    t.accumulate(table, full);
  });
}

Var block_diagonal(std::span<const Var> blocks) {
  if (blocks.empty()) throw DimensionError("block_diagonal: no blocks");
  std::vector<Matrix> values;
  values.reserve(blocks.size());
  for (const Var& b : blocks) values.push_back(b.value());
  Matrix out = jkv::block_diagonal(values);
  std::vector<Var> owned(blocks.begin(), blocks.end());
  return tape_of(blocks[0]).record(std::move(out), blocks, [owned](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& b : owned) {
      if (t.requires_grad(b)) t.accumulate(b, g.block(off, off, b.rows(), b.cols()));
      off += b.rows();
    }
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) {
    throw DimensionError("reshape: " + shape_string(a.value()) + " to (" + std::to_string(rows) +
                         "x" + std::to_string(cols) + ")");
  }
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
  });
}

Var layer_norm_rows(Var x, Var gain, Var offset, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index m = x.cols();
  if (gain.rows() != 1 || gain.cols() != m || offset.rows() != 1 || offset.cols() != m) {
    throw DimensionError("layer_norm_rows: gain/offset must be 1x" + std::to_string(m));
  }
  Matrix xhat(n, m);
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const auto centered = x.value().row(i).array() - mean;
    const double var = centered.square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std[i]).matrix();
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += offset.value().row(0);
  return tape_of(x).record(
      std::move(out), {x, gain, offset}, [x, gain, offset, xhat, inv_std](Tape& t, const Matrix& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(offset)) t.accumulate(offset, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix dxhat = g;
        dxhat.array().rowwise() *= gain.value().row(0).array();
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          const double mean_d = dxhat.row(i).mean();
          const double mean_dx = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
          dx.row(i) = inv_std[i] * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx).matrix();
        }
        t.accumulate(x, dx);
      });
}

Var masked_softmax_rows(Var scores, const BoolMatrix& allowed) {
  if (allowed.rows() != scores.rows() || allowed.cols() != scores.cols()) {
    throw DimensionError("masked_softmax_rows: mask " + shape_string(allowed) + " for scores " +
                         shape_string(scores.value()));
  }
  const Matrix& s = scores.value();
  Matrix p = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      if (allowed(i, j)) peak = std::max(peak, s(i, j));
    if (peak == -std::numeric_limits<double>::infinity()) {
      throw NumericError("masked_softmax_rows: query row " + std::to_string(i) +
                         " has no allowed key");
    }
    double total = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (!allowed(i, j)) continue;
      p(i, j) = std::exp(s(i, j) - peak);
      total += p(i, j);
    }
    p.row(i) /= total;
  }
  Matrix cached = p;
  return tape_of(scores).record(std::move(p), {scores}, [scores, cached](Tape& t, const Matrix& g) {
    Matrix ds = cached.cwiseProduct(g);
    const Vector row_dot = ds.rowwise().sum();
    ds -= (cached.array().colwise() * row_dot.array()).matrix();
    t.accumulate(scores, ds);
  });
}

Var mean_cross_entropy(Var logits, std::span<const Eigen::Index> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows() || z.rows() == 0) {
    throw DimensionError("mean_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(z));
  }
  Matrix prob(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto target = targets[static_cast<std::size_t>(i)];
    if (target < 0 || target >= z.cols()) {
      throw DimensionError("mean_cross_entropy: target " + std::to_string(target) +
                           " outside vocabulary of " + std::to_string(z.cols()));
    }
    const double peak = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - peak).exp();
    const double total = e.sum();
    prob.row(i) = (e / total).matrix();
    loss += -(z(i, target) - peak - std::log(total));
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  std::vector<Eigen::Index> tg(targets.begin(), targets.end());
  return tape_of(logits).record(std::move(out), {logits}, [logits, prob, tg, n](Tape& t, const Matrix& g) {
    Matrix d = prob;
    for (std::size_t i = 0; i < tg.size(); ++i) d(static_cast<Eigen::Index>(i), tg[i]) -= 1.0;
    t.accumulate(logits, d * (g(0, 0) / n));
  });
}

Var rotation_operator(Var angles, double step) {
  if (angles.rows() != 1) throw DimensionError("rotation_operator: angles must be a row");
  const Eigen::Index m = angles.cols();
  Matrix out = Matrix::Zero(2 * m, 2 * m);
  for (Eigen::Index b = 0; b < m; ++b) {
    const double phi = angles.value()(0, b) * step;
    const double c = std::cos(phi), s = std::sin(phi);
    out(2 * b, 2 * b) = c;
    out(2 * b, 2 * b + 1) = -s;
    out(2 * b + 1, 2 * b) = s;
    out(2 * b + 1, 2 * b + 1) = c;
  }
  return tape_of(angles).record(std::move(out), {angles}, [angles, step](Tape& t, const Matrix& g) {
    const Eigen::Index m = angles.cols();
    Matrix d(1, m);
    for (Eigen::Index b = 0; b < m; ++b) {
      const double phi = angles.value()(0, b) * step;
      const double c = std::cos(phi), s = std::sin(phi);
      const double dphi = -s * g(2 * b, 2 * b) - c * g(2 * b, 2 * b + 1) + c * g(2 * b + 1, 2 * b) -
                          s * g(2 * b + 1, 2 * b + 1);
      d(0, b) = dphi * step;
    }
    t.accumulate(angles, d);
  });
}

Var diagonal_operator(Var log_magnitudes, double bound) {
  if (log_magnitudes.rows() != 1) throw DimensionError("diagonal_operator: expects a row");
  const double limit = std::log(bound);
  const Eigen::Index d = log_magnitudes.cols();
  Matrix out = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    out(i, i) = std::exp(std::clamp(log_magnitudes.value()(0, i), -limit, limit));
  }
  Vector diag = out.diagonal();
  return tape_of(log_magnitudes)
      .record(std::move(out), {log_magnitudes}, [log_magnitudes, diag, limit](Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(1, diag.size());
        for (Eigen::Index i = 0; i < diag.size(); ++i) {
          const double p = log_magnitudes.value()(0, i);
          if (p > -limit && p < limit) d(0, i) = g(i, i) * diag[i];
        }
        t.accumulate(log_magnitudes, d);
      });
}

Var low_rank_operator(Var u, Var v, double bound) {
  if (u.rows() != v.rows() || u.cols() != v.cols()) {
    throw DimensionError("low_rank_operator: factor shapes " + shape_string(u.value()) + " and " +
                         shape_string(v.value()));
  }
  const double radius = 1.0 - 1.0 / bound;
  const Matrix m = u.value() * v.value().transpose();
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const double sigma = svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
  const double s = sigma > radius ? radius / sigma : 1.0;
  Matrix out = Matrix::Identity(m.rows(), m.cols()) + s * m;
  Matrix top;
  if (sigma > radius) top = svd.matrixU().col(0) * svd.matrixV().col(0).transpose();
  return tape_of(u).record(std::move(out), {u, v}, [u, v, m, s, sigma, radius, top](Tape& t, const Matrix& g) {
    Matrix dm = s * g;
    if (top.size() > 0) dm -= (radius / (sigma * sigma)) * g.cwiseProduct(m).sum() * top;
    if (t.requires_grad(u)) t.accumulate(u, dm * v.value());
    if (t.requires_grad(v)) t.accumulate(v, dm.transpose() * u.value());
  });
}

Var inverse(Var a) {
  if (a.rows() != a.cols()) throw DimensionError("inverse: non-square " + shape_string(a.value()));
  Eigen::FullPivLU<Matrix> lu(a.value());
  if (!lu.isInvertible()) throw NumericError("inverse: singular matrix");
  Matrix out = lu.inverse();
  Matrix inv_t = out.transpose();
  return tape_of(a).record(std::move(out), {a}, [a, inv_t](Tape& t, const Matrix& g) {
    t.accumulate(a, -(inv_t * g * inv_t));
  });
}

Var rowwise_transform(Var x, std::span<const Eigen::Index> group, std::span<const Var> mats,
                      bool transpose_mats) {
  if (static_cast<Eigen::Index>(group.size()) != x.rows()) {
    throw DimensionError("rowwise_transform: " + std::to_string(group.size()) +
                         " group ids for " + std::to_string(x.rows()) + " rows");
  }
  const Eigen::Index d = x.cols();
  for (const Var& m : mats) {
    if (m.rows() != d || m.cols() != d) {
      throw DimensionError("rowwise_transform: operator " + shape_string(m.value()) +
                           " for row width " + std::to_string(d));
    }
  }
  // Rows sharing an operator are transformed together.
  std::vector<std::vector<Eigen::Index>> members(mats.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i] < 0 || group[i] >= static_cast<Eigen::Index>(mats.size())) {
      throw DimensionError("rowwise_transform: group id out of range");
    }
    members[static_cast<std::size_t>(group[i])].push_back(static_cast<Eigen::Index>(i));
  }
  Matrix out(x.rows(), d);
  for (std::size_t gi = 0; gi < mats.size(); ++gi) {
    if (members[gi].empty()) continue;
    const Matrix rows = x.value()(members[gi], Eigen::all);
    Matrix res = transpose_mats ? Matrix(rows * mats[gi].value().transpose())
                                : Matrix(rows * mats[gi].value());
    for (std::size_t r = 0; r < members[gi].size(); ++r) out.row(members[gi][r]) = res.row(static_cast<Eigen::Index>(r));
  }
  std::vector<Var> parents{x};
  parents.insert(parents.end(), mats.begin(), mats.end());
  std::vector<Var> owned(mats.begin(), mats.end());
  return tape_of(x).record(std::move(out), parents, [x, owned, members, transpose_mats](Tape& t, const Matrix& g) {
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t gi = 0; gi < owned.size(); ++gi) {
      if (members[gi].empty()) continue;
      const Matrix gr = g(members[gi], Eigen::all);
      const Matrix& mv = owned[gi].value();
      if (t.requires_grad(x)) {
        Matrix part = transpose_mats ? Matrix(gr * mv) : Matrix(gr * mv.transpose());
        for (std::size_t r = 0; r < members[gi].size(); ++r) dx.row(members[gi][r]) = part.row(static_cast<Eigen::Index>(r));
      }
      if (t.requires_grad(owned[gi])) {
        const Matrix xr = x.value()(members[gi], Eigen::all);
        t.accumulate(owned[gi], transpose_mats ? Matrix(gr.transpose() * xr) : Matrix(xr.transpose() * gr));
      }
    }
    t.accumulate(x, dx);
  });
}

}  // namespace jkv::ad
