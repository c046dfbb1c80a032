#include "molang/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace molang {
namespace ops {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

namespace {

Map map2(Tensor& t, int64_t rows, int64_t cols) { return Map(t.data.data(), rows, cols); }
CMap cmap2(const Tensor& t, int64_t rows, int64_t cols) {
  return CMap(t.data.data(), rows, cols);
}

// flatten all but the last dim
int64_t lead(const Tensor& t) { return t.numel() / t.shape.back(); }

}  // namespace

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.val(a), t.val(b), "add");
  Tensor out = t.val(a);
  const Tensor& vb = t.val(b);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
  return t.emit(std::move(out), {a.id, b.id}, [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) {
      Tensor& ga = tp.grad_acc(a.id);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad_acc(b.id);
      for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
    }
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t.val(a), t.val(b), "sub");
  Tensor out = t.val(a);
  const Tensor& vb = t.val(b);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
  return t.emit(std::move(out), {a.id, b.id}, [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) {
      Tensor& ga = tp.grad_acc(a.id);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad_acc(b.id);
      for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_same_shape(t.val(a), t.val(b), "mul");
  Tensor out = t.val(a);
  const Tensor& vb = t.val(b);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
  return t.emit(std::move(out), {a.id, b.id}, [a, b](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    const Tensor& va = tp.val(a);
    const Tensor& vb2 = tp.val(b);
    if (tp.needs_grad(a)) {
      Tensor& ga = tp.grad_acc(a.id);
      for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad_acc(b.id);
      for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
    }
  });
}

Var scale(Tape& t, Var a, float c) {
  Tensor out = t.val(a);
  for (float& v : out.data) v *= c;
  return t.emit(std::move(out), {a.id}, [a, c](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    Tensor& ga = tp.grad_acc(a.id);
    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
  });
}

Var add_bias(Tape& t, Var x, Var b) {
  const Tensor& vx = t.val(x);
  const Tensor& vb = t.val(b);
  int64_t d = vx.shape.back();
  if (vb.numel() != d) {
    throw ShapeError("add_bias: bias " + shape_str(vb.shape) + " vs last dim " +
                     std::to_string(d));
  }
  int64_t n = lead(vx);
  Tensor out = vx;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.data[static_cast<size_t>(i * d + j)] += vb.data[static_cast<size_t>(j)];
  return t.emit(std::move(out), {x.id, b.id}, [x, b, n, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    if (tp.needs_grad(x)) {
      Tensor& gx = tp.grad_acc(x.id);
      for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad_acc(b.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * d + j)];
    }
  });
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw ShapeError("matmul: " + shape_str(va.shape) + " x " + shape_str(vb.shape));
  }
  int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out = Tensor::uninit({m, n});
  map2(out, m, n).noalias() = cmap2(va, m, k) * cmap2(vb, k, n);
  return t.emit(std::move(out), {a.id, b.id}, [a, b, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    CMap gm(g.data.data(), m, n);
    if (tp.needs_grad(a)) {
      bool fresh;
      Map ga = map2(tp.grad_buf(a.id, &fresh), m, k);
      if (fresh)
        ga.noalias() = gm * cmap2(tp.val(b), k, n).transpose();
      else
        ga.noalias() += gm * cmap2(tp.val(b), k, n).transpose();
    }
    if (tp.needs_grad(b)) {
      bool fresh;
      Map gb = map2(tp.grad_buf(b.id, &fresh), k, n);
      if (fresh)
        gb.noalias() = cmap2(tp.val(a), m, k).transpose() * gm;
      else
        gb.noalias() += cmap2(tp.val(a), m, k).transpose() * gm;
    }
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& va = t.val(a);
  const Tensor& vb = t.val(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(va.shape) + " x " + shape_str(vb.shape) + "^T");
  }
  int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(0);
  Tensor out = Tensor::uninit({m, n});
  map2(out, m, n).noalias() = cmap2(va, m, k) * cmap2(vb, n, k).transpose();
  return t.emit(std::move(out), {a.id, b.id}, [a, b, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    CMap gm(g.data.data(), m, n);
    if (tp.needs_grad(a)) {
      bool fresh;
      Map ga = map2(tp.grad_buf(a.id, &fresh), m, k);
      if (fresh)
        ga.noalias() = gm * cmap2(tp.val(b), n, k);
      else
        ga.noalias() += gm * cmap2(tp.val(b), n, k);
    }
    if (tp.needs_grad(b)) {
      bool fresh;
      Map gb = map2(tp.grad_buf(b.id, &fresh), n, k);
      if (fresh)
        gb.noalias() = gm.transpose() * cmap2(tp.val(a), m, k);
      else
        gb.noalias() += gm.transpose() * cmap2(tp.val(a), m, k);
    }
  });
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor& vx = t.val(x);
  const Tensor& vw = t.val(w);
  if (vw.rank() != 2 || vx.shape.back() != vw.dim(0)) {
    throw ShapeError("linear: input " + shape_str(vx.shape) + " vs weight " +
                     shape_str(vw.shape));
  }
  int64_t n = lead(vx), din = vw.dim(0), dout = vw.dim(1);
  std::vector<int64_t> out_shape = vx.shape;
  out_shape.back() = dout;
  Tensor out;
  out.shape = std::move(out_shape);
  out.data.resize(static_cast<size_t>(n * dout));
  map2(out, n, dout).noalias() = cmap2(vx, n, din) * cmap2(vw, din, dout);
  if (b.valid()) {
    const Tensor& vb = t.val(b);
    if (vb.numel() != dout) throw ShapeError("linear: bias shape mismatch");
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < dout; ++j)
        out.data[static_cast<size_t>(i * dout + j)] += vb.data[static_cast<size_t>(j)];
  }
  std::vector<int> parents = {x.id, w.id};
  if (b.valid()) parents.push_back(b.id);
  return t.emit(std::move(out), std::move(parents), [x, w, b, n, din, dout](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    CMap gm(g.data.data(), n, dout);
    if (tp.needs_grad(x)) {
      bool fresh;
      Map gx = map2(tp.grad_buf(x.id, &fresh), n, din);
      if (fresh)
        gx.noalias() = gm * cmap2(tp.val(w), din, dout).transpose();
      else
        gx.noalias() += gm * cmap2(tp.val(w), din, dout).transpose();
    }
    if (tp.needs_grad(w)) {
      bool fresh;
      Map gw = map2(tp.grad_buf(w.id, &fresh), din, dout);
      if (fresh)
        gw.noalias() = cmap2(tp.val(x), n, din).transpose() * gm;
      else
        gw.noalias() += cmap2(tp.val(x), n, din).transpose() * gm;
    }
    if (b.valid() && tp.needs_grad(b)) {
      Tensor& gb = tp.grad_acc(b.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < dout; ++j)
          gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * dout + j)];
    }
  });
}

Var relu(Tape& t, Var x) {
  Tensor out = t.val(x);
  for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
  return t.emit(std::move(out), {x.id}, [x](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    const Tensor& y = tp.val(Var{self});
    Tensor& gx = tp.grad_acc(x.id);
    for (size_t i = 0; i < g.data.size(); ++i)
      if (y.data[i] > 0.0f) gx.data[i] += g.data[i];
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
}

Var gelu(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  Tensor out = vx;
  int64_t n = out.numel();
  using Arr = Eigen::Map<Eigen::ArrayXf>;
  using CArr = Eigen::Map<const Eigen::ArrayXf>;
  {
    CArr v(vx.data.data(), n);
    Arr o(out.data.data(), n);
    o = 0.5f * v * (1.0f + (kGeluC * (v + 0.044715f * v.cube())).tanh());
  }
  return t.emit(std::move(out), {x.id}, [x, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    const Tensor& vx2 = tp.val(x);
    bool fresh;
    Tensor& gx = tp.grad_buf(x.id, &fresh);
    CArr v(vx2.data.data(), n);
    CArr gr(g.data.data(), n);
    Eigen::ArrayXf th = (kGeluC * (v + 0.044715f * v.cube())).tanh();
    auto expr = gr * (0.5f * (1.0f + th) +
                      0.5f * v * (1.0f - th.square()) *
                          (kGeluC * (1.0f + 0.134145f * v.square())));
    if (fresh)
      Arr(gx.data.data(), n) = expr;
    else
      Arr(gx.data.data(), n) += expr;
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, float eps) {
  const Tensor& vx = t.val(x);
  int64_t d = vx.shape.back();
  int64_t n = lead(vx);
  const Tensor& vg = t.val(gamma);
  const Tensor& vb = t.val(beta);
  if (vg.numel() != d || vb.numel() != d) throw ShapeError("layer_norm: affine shape mismatch");
  Tensor out = vx;
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  auto xhat = std::make_shared<std::vector<float>>(vx.data.size());
  for (int64_t i = 0; i < n; ++i) {
    const float* row = vx.data.data() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<size_t>(i)] = is;
    float* orow = out.data.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      float h = (row[j] - static_cast<float>(mean)) * is;
      (*xhat)[static_cast<size_t>(i * d + j)] = h;
      orow[j] = h * vg.data[static_cast<size_t>(j)] + vb.data[static_cast<size_t>(j)];
    }
  }
  return t.emit(std::move(out), {x.id, gamma.id, beta.id},
                [x, gamma, beta, n, d, inv_std, xhat](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    const Tensor& vg = tp.val(gamma);
    if (tp.needs_grad(gamma)) {
      Tensor& gg = tp.grad_acc(gamma.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          gg.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * d + j)] *
                                             (*xhat)[static_cast<size_t>(i * d + j)];
    }
    if (tp.needs_grad(beta)) {
      Tensor& gb = tp.grad_acc(beta.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * d + j)];
    }
    if (tp.needs_grad(x)) {
      Tensor& gx = tp.grad_acc(x.id);
      for (int64_t i = 0; i < n; ++i) {
        // dL/dxhat_j = g_j * gamma_j; standard layer norm backward
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double dh = static_cast<double>(g.data[static_cast<size_t>(i * d + j)]) *
                      vg.data[static_cast<size_t>(j)];
          sum_dh += dh;
          sum_dh_h += dh * (*xhat)[static_cast<size_t>(i * d + j)];
        }
        float is = (*inv_std)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) {
          double dh = static_cast<double>(g.data[static_cast<size_t>(i * d + j)]) *
                      vg.data[static_cast<size_t>(j)];
          double h = (*xhat)[static_cast<size_t>(i * d + j)];
          gx.data[static_cast<size_t>(i * d + j)] += static_cast<float>(
              is * (dh - sum_dh / d - h * sum_dh_h / d));
        }
      }
    }
  });
}

Var dropout(Tape& t, Var x, float p, Rng& rng, bool training) {
  if (!training || p <= 0.0f) return x;
  const Tensor& vx = t.val(x);
  auto mask = std::make_shared<std::vector<float>>(vx.data.size());
  float keep = 1.0f - p;
  float inv_keep = 1.0f / keep;
  Tensor out = vx;
  for (size_t i = 0; i < out.data.size(); ++i) {
    float m = rng.uniform() < keep ? inv_keep : 0.0f;
    (*mask)[i] = m;
    out.data[i] *= m;
  }
  return t.emit(std::move(out), {x.id}, [x, mask](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    Tensor& gx = tp.grad_acc(x.id);
    for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * (*mask)[i];
  });
}

Var gather_rows(Tape& t, Var table, const std::vector<int64_t>& ids) {
  const Tensor& vt = t.val(table);
  if (vt.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
  int64_t d = vt.dim(1);
  int64_t n = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = ids[static_cast<size_t>(i)];
    if (r < 0 || r >= vt.dim(0)) throw ShapeError("gather_rows: id out of range");
    std::copy_n(vt.data.data() + r * d, d, out.data.data() + i * d);
  }
  auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
  return t.emit(std::move(out), {table.id}, [table, ids_copy, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    Tensor& gt = tp.grad_acc(table.id);
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      int64_t r = (*ids_copy)[i];
      for (int64_t j = 0; j < d; ++j)
        gt.data[static_cast<size_t>(r * d + j)] += g.data[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
    }
  });
}

Var select_rows(Tape& t, Var x, const std::vector<int64_t>& idx) {
  const Tensor& vx = t.val(x);
  if (vx.rank() != 2) throw ShapeError("select_rows: input must be 2-D");
  int64_t d = vx.dim(1);
  int64_t n = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = idx[static_cast<size_t>(i)];
    if (r < 0 || r >= vx.dim(0)) throw ShapeError("select_rows: index out of range");
    std::copy_n(vx.data.data() + r * d, d, out.data.data() + i * d);
  }
  auto idx_copy = std::make_shared<std::vector<int64_t>>(idx);
  return t.emit(std::move(out), {x.id}, [x, idx_copy, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    Tensor& gx = tp.grad_acc(x.id);
    for (size_t i = 0; i < idx_copy->size(); ++i) {
      int64_t r = (*idx_copy)[i];
      for (int64_t j = 0; j < d; ++j)
        gx.data[static_cast<size_t>(r * d + j)] += g.data[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
    }
  });
}

Var pack_with_cls(Tape& t, Var frames, Var cls_vec, const PackedOffsets& fo) {
  const Tensor& vf = t.val(frames);
  const Tensor& vc = t.val(cls_vec);
  int64_t d = vf.shape.back();
  if (vc.numel() != d) throw ShapeError("pack_with_cls: cls vector dim mismatch");
  int64_t b_count = fo.items();
  int64_t n_out = vf.numel() / d + b_count;
  Tensor out = Tensor::zeros({n_out, d});
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t dst = fo.offsets[static_cast<size_t>(b)] + b;
    std::copy_n(vc.data.data(), d, out.data.data() + dst * d);
    int64_t len = fo.len(b);
    std::copy_n(vf.data.data() + fo.offsets[static_cast<size_t>(b)] * d, len * d,
                out.data.data() + (dst + 1) * d);
  }
  auto fo_copy = std::make_shared<PackedOffsets>(fo);
  return t.emit(std::move(out), {frames.id, cls_vec.id},
                [frames, cls_vec, fo_copy, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    int64_t b_count = fo_copy->items();
    if (tp.needs_grad(cls_vec)) {
      Tensor& gc = tp.grad_acc(cls_vec.id);
      for (int64_t b = 0; b < b_count; ++b) {
        int64_t src = fo_copy->offsets[static_cast<size_t>(b)] + b;
        for (int64_t j = 0; j < d; ++j)
          gc.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(src * d + j)];
      }
    }
    if (tp.needs_grad(frames)) {
      Tensor& gf = tp.grad_acc(frames.id);
      for (int64_t b = 0; b < b_count; ++b) {
        int64_t src = fo_copy->offsets[static_cast<size_t>(b)] + b + 1;
        int64_t len = fo_copy->len(b);
        for (int64_t i = 0; i < len * d; ++i)
          gf.data[static_cast<size_t>(fo_copy->offsets[static_cast<size_t>(b)] * d + i)] +=
              g.data[static_cast<size_t>(src * d + i)];
      }
    }
  });
}

Var merge_cls_frames(Tape& t, Var cls_rows, Var frames, const PackedOffsets& fo) {
  const Tensor& vc = t.val(cls_rows);
  const Tensor& vf = t.val(frames);
  int64_t d = vf.shape.back();
  int64_t b_count = fo.items();
  if (vc.rank() != 2 || vc.dim(0) != b_count || vc.dim(1) != d) {
    throw ShapeError("merge_cls_frames: cls rows shape mismatch");
  }
  Tensor out = Tensor::zeros({vf.numel() / d + b_count, d});
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t dst = fo.offsets[static_cast<size_t>(b)] + b;
    std::copy_n(vc.data.data() + b * d, d, out.data.data() + dst * d);
    std::copy_n(vf.data.data() + fo.offsets[static_cast<size_t>(b)] * d, fo.len(b) * d,
                out.data.data() + (dst + 1) * d);
  }
  auto fo_copy = std::make_shared<PackedOffsets>(fo);
  return t.emit(std::move(out), {cls_rows.id, frames.id},
                [cls_rows, frames, fo_copy, d](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    int64_t b_count = fo_copy->items();
    if (tp.needs_grad(cls_rows)) {
      Tensor& gc = tp.grad_acc(cls_rows.id);
      for (int64_t b = 0; b < b_count; ++b) {
        int64_t src = fo_copy->offsets[static_cast<size_t>(b)] + b;
        for (int64_t j = 0; j < d; ++j)
          gc.data[static_cast<size_t>(b * d + j)] += g.data[static_cast<size_t>(src * d + j)];
      }
    }
    if (tp.needs_grad(frames)) {
      Tensor& gf = tp.grad_acc(frames.id);
      for (int64_t b = 0; b < b_count; ++b) {
        int64_t src = fo_copy->offsets[static_cast<size_t>(b)] + b + 1;
        int64_t base = fo_copy->offsets[static_cast<size_t>(b)] * d;
        for (int64_t i = 0; i < fo_copy->len(b) * d; ++i)
          gf.data[static_cast<size_t>(base + i)] += g.data[static_cast<size_t>(src * d + i)];
      }
    }
  });
}

Var mhsa_packed(Tape& t, Var x, const PackedOffsets& po, Var w_qkv, Var b_qkv, Var w_out,
                Var b_out, int heads) {
  const Tensor& vx = t.val(x);
  int64_t n = vx.dim(0), d = vx.dim(1);
  if (d % heads != 0) {
    throw ShapeError("mhsa: model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const Tensor& vw = t.val(w_qkv);
  if (vw.dim(0) != d || vw.dim(1) != 3 * d) throw ShapeError("mhsa: qkv weight shape");
  int64_t dh = d / heads;
  float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto qkv = std::make_shared<Tensor>(Tensor::uninit({n, 3 * d}));
  map2(*qkv, n, 3 * d).noalias() = cmap2(vx, n, d) * cmap2(vw, d, 3 * d);
  {
    const Tensor& vb = t.val(b_qkv);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < 3 * d; ++j)
        qkv->data[static_cast<size_t>(i * 3 * d + j)] += vb.data[static_cast<size_t>(j)];
  }

  // attention probabilities, ragged: per item b and head h a T_b x T_b block
  int64_t b_count = po.items();
  std::vector<int64_t> attn_off(static_cast<size_t>(b_count) + 1, 0);
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t len = po.len(b);
    attn_off[static_cast<size_t>(b) + 1] = attn_off[static_cast<size_t>(b)] + heads * len * len;
  }
  // Aligned buffer: Eigen's vectorized exp takes an address-dependent peeling
  // path on unaligned memory, which would make repeated forwards differ by 1ulp.
  auto attn = std::make_shared<FloatBuffer>(static_cast<size_t>(attn_off.back()));
  auto ctx = std::make_shared<Tensor>(Tensor::uninit({n, d}));  // pre-output-projection

  CMap qkv_m(qkv->data.data(), n, 3 * d);
  Map ctx_m(ctx->data.data(), n, d);
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t off = po.offsets[static_cast<size_t>(b)];
    int64_t len = po.len(b);
    for (int h = 0; h < heads; ++h) {
      auto q = qkv_m.block(off, h * dh, len, dh);
      auto k = qkv_m.block(off, d + h * dh, len, dh);
      auto v = qkv_m.block(off, 2 * d + h * dh, len, dh);
      Map p(attn->data() + attn_off[static_cast<size_t>(b)] + h * len * len, len, len);
      p.noalias() = q * k.transpose();
      p *= scale;
      for (int64_t i = 0; i < len; ++i) {
        auto row = p.row(i).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      ctx_m.block(off, h * dh, len, dh).noalias() = p * v;
    }
  }

  const Tensor& vwo = t.val(w_out);
  const Tensor& vbo = t.val(b_out);
  Tensor out = Tensor::uninit({n, d});
  map2(out, n, d).noalias() = ctx_m * cmap2(vwo, d, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      out.data[static_cast<size_t>(i * d + j)] += vbo.data[static_cast<size_t>(j)];

  auto po_copy = std::make_shared<PackedOffsets>(po);
  auto attn_off_copy = std::make_shared<std::vector<int64_t>>(std::move(attn_off));
  return t.emit(
      std::move(out), {x.id, w_qkv.id, b_qkv.id, w_out.id, b_out.id},
      [x, w_qkv, b_qkv, w_out, b_out, heads, n, d, dh, scale, qkv, attn, ctx, po_copy,
       attn_off_copy](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{self});
        CMap gm(g.data.data(), n, d);
        CMap ctx_m(ctx->data.data(), n, d);

        // output projection
        Tensor d_ctx = Tensor::uninit({n, d});
        Map d_ctx_m(d_ctx.data.data(), n, d);
        d_ctx_m.noalias() = gm * cmap2(tp.val(w_out), d, d).transpose();
        if (tp.needs_grad(w_out)) {
          bool fresh;
          Map gw = map2(tp.grad_buf(w_out.id, &fresh), d, d);
          if (fresh)
            gw.noalias() = ctx_m.transpose() * gm;
          else
            gw.noalias() += ctx_m.transpose() * gm;
        }
        if (tp.needs_grad(b_out)) {
          Tensor& gb = tp.grad_acc(b_out.id);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j)
              gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * d + j)];
        }

        Tensor d_qkv = Tensor::uninit({n, 3 * d});
        Map d_qkv_m(d_qkv.data.data(), n, 3 * d);
        CMap qkv_m(qkv->data.data(), n, 3 * d);
        int64_t b_count = po_copy->items();
        for (int64_t b = 0; b < b_count; ++b) {
          int64_t off = po_copy->offsets[static_cast<size_t>(b)];
          int64_t len = po_copy->len(b);
          for (int h = 0; h < heads; ++h) {
            auto q = qkv_m.block(off, h * dh, len, dh);
            auto k = qkv_m.block(off, d + h * dh, len, dh);
            auto v = qkv_m.block(off, 2 * d + h * dh, len, dh);
            CMap p(attn->data() + (*attn_off_copy)[static_cast<size_t>(b)] + h * len * len,
                   len, len);
            auto d_o = d_ctx_m.block(off, h * dh, len, dh);
            d_qkv_m.block(off, 2 * d + h * dh, len, dh).noalias() = p.transpose() * d_o;
            RowMat dp(len, len);
            dp.noalias() = d_o * v.transpose();
            // softmax backward per row
            for (int64_t i = 0; i < len; ++i) {
              auto dpr = dp.row(i).array();
              auto pr = p.row(i).array();
              float dot = (dpr * pr).sum();
              dpr = (dpr - dot) * pr * scale;
            }
            d_qkv_m.block(off, h * dh, len, dh).noalias() = dp * k;
            d_qkv_m.block(off, d + h * dh, len, dh).noalias() = dp.transpose() * q;
          }
        }

        if (tp.needs_grad(b_qkv)) {
          Tensor& gb = tp.grad_acc(b_qkv.id);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < 3 * d; ++j)
              gb.data[static_cast<size_t>(j)] += d_qkv.data[static_cast<size_t>(i * 3 * d + j)];
        }
        if (tp.needs_grad(w_qkv)) {
          bool fresh;
          Map gw = map2(tp.grad_buf(w_qkv.id, &fresh), d, 3 * d);
          if (fresh)
            gw.noalias() = cmap2(tp.val(x), n, d).transpose() * CMap(d_qkv.data.data(), n, 3 * d);
          else
            gw.noalias() += cmap2(tp.val(x), n, d).transpose() * CMap(d_qkv.data.data(), n, 3 * d);
        }
        if (tp.needs_grad(x)) {
          bool fresh;
          Map gx = map2(tp.grad_buf(x.id, &fresh), n, d);
          if (fresh)
            gx.noalias() = CMap(d_qkv.data.data(), n, 3 * d) * cmap2(tp.val(w_qkv), d, 3 * d).transpose();
          else
            gx.noalias() += CMap(d_qkv.data.data(), n, 3 * d) * cmap2(tp.val(w_qkv), d, 3 * d).transpose();
        }
      });
}

Var graph_conv(Tape& t, Var x, const Tensor& adjacency, Var w, int joints, int feat) {
  const Tensor& vx = t.val(x);
  int64_t j = joints, g = feat;
  if (vx.shape.back() != j * g) throw ShapeError("graph_conv: last dim must be joints*feat");
  if (adjacency.rank() != 2 || adjacency.dim(0) != j || adjacency.dim(1) != j) {
    throw ShapeError("graph_conv: adjacency shape mismatch");
  }
  const Tensor& vw = t.val(w);
  if (vw.rank() != 2 || vw.dim(0) != g || vw.dim(1) != g) {
    throw ShapeError("graph_conv: weight must be [feat, feat]");
  }
  int64_t n = lead(vx);
  CMap a_m(adjacency.data.data(), j, j);
  CMap w_m(vw.data.data(), g, g);
  Tensor out = Tensor::zeros(vx.shape);
  for (int64_t i = 0; i < n; ++i) {
    CMap h(vx.data.data() + i * j * g, j, g);
    Map y(out.data.data() + i * j * g, j, g);
    y.noalias() = (a_m * h) * w_m;
    y = y.cwiseMax(0.0f);
  }
  auto adj = std::make_shared<Tensor>(adjacency);
  return t.emit(std::move(out), {x.id, w.id}, [x, w, adj, n, j, g](Tape& tp, int self) {
    const Tensor& gr = tp.grad(Var{self});
    const Tensor& y = tp.val(Var{self});
    const Tensor& vx2 = tp.val(x);
    CMap a_m(adj->data.data(), j, j);
    CMap w_m(tp.val(w).data.data(), g, g);
    Tensor* gw = tp.needs_grad(w) ? &tp.grad_acc(w.id) : nullptr;
    Tensor* gx = tp.needs_grad(x) ? &tp.grad_acc(x.id) : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      CMap h(vx2.data.data() + i * j * g, j, g);
      RowMat dz(j, g);
      for (int64_t r = 0; r < j; ++r)
        for (int64_t c = 0; c < g; ++c) {
          size_t off = static_cast<size_t>((i * j + r) * g + c);
          dz(r, c) = y.data[off] > 0.0f ? gr.data[off] : 0.0f;
        }
      if (gw) {
        Map gw_m(gw->data.data(), g, g);
        gw_m.noalias() += (a_m * h).transpose() * dz;
      }
      if (gx) {
        Map gx_m(gx->data.data() + i * j * g, j, g);
        gx_m.noalias() += a_m.transpose() * (dz * w_m.transpose());
      }
    }
  });
}

Var l2_normalize_rows(Tape& t, Var x, float eps) {
  const Tensor& vx = t.val(x);
  int64_t d = vx.shape.back();
  int64_t n = lead(vx);
  Tensor out = vx;
  auto inv_norm = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    const float* row = vx.data.data() + i * d;
    for (int64_t k = 0; k < d; ++k) s += static_cast<double>(row[k]) * row[k];
    float inv = static_cast<float>(1.0 / std::sqrt(s + eps));
    (*inv_norm)[static_cast<size_t>(i)] = inv;
    float* orow = out.data.data() + i * d;
    for (int64_t k = 0; k < d; ++k) orow[k] = row[k] * inv;
  }
  return t.emit(std::move(out), {x.id}, [x, n, d, inv_norm](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    const Tensor& y = tp.val(Var{self});
    Tensor& gx = tp.grad_acc(x.id);
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t k = 0; k < d; ++k)
        dot += static_cast<double>(g.data[static_cast<size_t>(i * d + k)]) *
               y.data[static_cast<size_t>(i * d + k)];
      float inv = (*inv_norm)[static_cast<size_t>(i)];
      for (int64_t k = 0; k < d; ++k) {
        size_t off = static_cast<size_t>(i * d + k);
        gx.data[off] += static_cast<float>((g.data[off] - dot * y.data[off]) * inv);
      }
    }
  });
}

Var scale_by_exp(Tape& t, Var x, Var s) {
  const Tensor& vs = t.val(s);
  if (vs.numel() != 1) throw ShapeError("scale_by_exp: s must be scalar");
  float f = std::exp(vs.data[0]);
  Tensor out = t.val(x);
  for (float& v : out.data) v *= f;
  return t.emit(std::move(out), {x.id, s.id}, [x, s, f](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    if (tp.needs_grad(x)) {
      Tensor& gx = tp.grad_acc(x.id);
      for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * f;
    }
    if (tp.needs_grad(s)) {
      const Tensor& vx = tp.val(x);
      double acc = 0.0;
      for (size_t i = 0; i < g.data.size(); ++i)
        acc += static_cast<double>(g.data[i]) * vx.data[i];
      tp.grad_acc(s.id).data[0] += static_cast<float>(acc * f);
    }
  });
}

Var transpose2(Tape& t, Var x) {
  const Tensor& vx = t.val(x);
  if (vx.rank() != 2) throw ShapeError("transpose2: input must be 2-D");
  int64_t m = vx.dim(0), n = vx.dim(1);
  Tensor out = Tensor::zeros({n, m});
  map2(out, n, m) = cmap2(vx, m, n).transpose();
  return t.emit(std::move(out), {x.id}, [x, m, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(Var{self});
    map2(tp.grad_acc(x.id), m, n) += cmap2(g, n, m).transpose();
  });
}

Var cross_entropy_diag(Tape& t, Var s) {
  const Tensor& vs = t.val(s);
  if (vs.rank() != 2 || vs.dim(0) != vs.dim(1)) throw ShapeError("cross_entropy_diag: square input");
  int64_t n = vs.dim(0);
  auto probs = std::make_shared<Tensor>(Tensor::zeros({n, n}));
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = vs.data.data() + i * n;
    float mx = row[0];
    for (int64_t k = 1; k < n; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (int64_t k = 0; k < n; ++k) z += std::exp(static_cast<double>(row[k]) - mx);
    for (int64_t k = 0; k < n; ++k)
      probs->data[static_cast<size_t>(i * n + k)] =
          static_cast<float>(std::exp(static_cast<double>(row[k]) - mx) / z);
    total += std::log(z) + mx - row[i];
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
  return t.emit(std::move(out), {s.id}, [s, probs, n](Tape& tp, int self) {
    float g = tp.grad(Var{self}).data[0];
    Tensor& gs = tp.grad_acc(s.id);
    float inv_n = 1.0f / static_cast<float>(n);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < n; ++k) {
        float p = probs->data[static_cast<size_t>(i * n + k)];
        gs.data[static_cast<size_t>(i * n + k)] += g * inv_n * (p - (i == k ? 1.0f : 0.0f));
      }
  });
}

Var l1_weighted(Tape& t, Var pred, const Tensor& target, const std::vector<float>& row_weight,
                const std::vector<int64_t>& item_of_row, int64_t items) {
  const Tensor& vp = t.val(pred);
  require_same_shape(vp, target, "l1_weighted");
  int64_t k = vp.shape.back();
  int64_t n = lead(vp);
  if (static_cast<int64_t>(row_weight.size()) != n ||
      static_cast<int64_t>(item_of_row.size()) != n) {
    throw ShapeError("l1_weighted: row metadata length mismatch");
  }
  std::vector<int64_t> rows_per_item(static_cast<size_t>(items), 0);
  for (int64_t i = 0; i < n; ++i)
    if (row_weight[static_cast<size_t>(i)] != 0.0f)
      ++rows_per_item[static_cast<size_t>(item_of_row[static_cast<size_t>(i)])];
  int64_t active_items = 0;
  for (int64_t c : rows_per_item)
    if (c > 0) ++active_items;
  if (active_items == 0) throw std::invalid_argument("l1_weighted: no rows selected");

  std::vector<double> item_sum(static_cast<size_t>(items), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    float w = row_weight[static_cast<size_t>(i)];
    if (w == 0.0f) continue;
    double s = 0.0;
    for (int64_t c = 0; c < k; ++c) {
      size_t off = static_cast<size_t>(i * k + c);
      s += std::abs(static_cast<double>(vp.data[off]) - target.data[off]);
    }
    item_sum[static_cast<size_t>(item_of_row[static_cast<size_t>(i)])] += w * s;
  }
  double total = 0.0;
  for (int64_t b = 0; b < items; ++b) {
    if (rows_per_item[static_cast<size_t>(b)] > 0)
      total += item_sum[static_cast<size_t>(b)] /
               (static_cast<double>(rows_per_item[static_cast<size_t>(b)]) * k);
  }
  total /= static_cast<double>(active_items);

  auto tgt = std::make_shared<Tensor>(target);
  auto rw = std::make_shared<std::vector<float>>(row_weight);
  auto ior = std::make_shared<std::vector<int64_t>>(item_of_row);
  auto rpi = std::make_shared<std::vector<int64_t>>(std::move(rows_per_item));
  return t.emit(Tensor::scalar(static_cast<float>(total)), {pred.id},
                [pred, tgt, rw, ior, rpi, n, k, active_items](Tape& tp, int self) {
    float g = tp.grad(Var{self}).data[0];
    const Tensor& vp2 = tp.val(pred);
    Tensor& gp = tp.grad_acc(pred.id);
    for (int64_t i = 0; i < n; ++i) {
      float w = (*rw)[static_cast<size_t>(i)];
      if (w == 0.0f) continue;
      int64_t b = (*ior)[static_cast<size_t>(i)];
      float coeff = g * w /
                    (static_cast<float>((*rpi)[static_cast<size_t>(b)]) * k * active_items);
      for (int64_t c = 0; c < k; ++c) {
        size_t off = static_cast<size_t>(i * k + c);
        float diff = vp2.data[off] - tgt->data[off];
        gp.data[off] += diff > 0.0f ? coeff : (diff < 0.0f ? -coeff : 0.0f);
      }
    }
  });
}

}  // namespace ops

bool Tensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace molang
