#include "qoebd/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "qoebd/error.hpp"

namespace qoebd {

void SSIMParams::validate() const {
  if (!(alpha > 0 && beta > 0 && gamma > 0)) throw ConfigError("ssim exponents must be positive");
  if (!(c1 > 0 && c2 > 0)) throw ConfigError("ssim constants must be positive");
  if (window < 0) throw ConfigError("ssim window must be non-negative");
  if (gaussian && !(sigma > 0)) throw ConfigError("ssim sigma must be positive");
}

std::vector<double> ssim_window(ImageShape shape, const SSIMParams& p) {
  const int side = std::min(shape.height, shape.width);
  int k = p.window;
  bool gauss = p.gaussian;
  if (k == 0) {
    k = side >= 32 ? 11 : 7;
    gauss = side >= 32;
  }
  k = std::max(1, std::min(k, side));
  std::vector<double> w(static_cast<std::size_t>(k), 1.0);
  if (gauss) {
    const double c = (k - 1) / 2.0;
    for (int i = 0; i < k; ++i) w[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * p.sigma * p.sigma));
  }
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return w;
}

namespace {

// Valid-mode separable correlation of an h x w plane.
void filter_valid(const double* in, int h, int w, const std::vector<double>& k, double* tmp, double* out) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1, oh = h - n + 1;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += k[static_cast<std::size_t>(j)] * in[r * w + c + j];
      tmp[r * ow + c] = s;
    }
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += k[static_cast<std::size_t>(j)] * tmp[(r + j) * ow + c];
      out[r * ow + c] = s;
    }
}

// Adjoint of filter_valid.
void filter_adjoint(const double* g, int h, int w, const std::vector<double>& k, double* tmp, double* out) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1, oh = h - n + 1;
  std::fill(tmp, tmp + static_cast<std::size_t>(h) * ow, 0.0);
  for (int r = 0; r < oh; ++r)
    for (int j = 0; j < n; ++j)
      for (int c = 0; c < ow; ++c) tmp[(r + j) * ow + c] += k[static_cast<std::size_t>(j)] * g[r * ow + c];
  std::fill(out, out + static_cast<std::size_t>(h) * w, 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c)
      for (int j = 0; j < n; ++j) out[r * w + c + j] += k[static_cast<std::size_t>(j)] * tmp[r * ow + c];
}

// base^e with non-integer exponents defined only on base >= 0.
double pw(double base, double e, double* deriv) {
  const bool integral = e == std::floor(e);
  if (!integral && base <= 0.0) {
    *deriv = 0.0;
    return 0.0;
  }
  if (e == 1.0) {
    *deriv = 1.0;
    return base;
  }
  *deriv = e * std::pow(base, e - 1.0);
  return std::pow(base, e);
}

struct WindowTerms {
  double s = 0.0;
  double d_mu = 0.0;   // dS/dmu_y
  double d_var = 0.0;  // dS/dvar_y
  double d_cov = 0.0;  // dS/dcov_xy
};

WindowTerms window_ssim(double mx, double my, double vx, double vy, double cxy, const SSIMParams& p) {
  WindowTerms t;
  const double na = 2 * mx * my + p.c1, da = mx * mx + my * my + p.c1;
  const double a = na / da;
  const double da_dmu = (2 * mx * da - na * 2 * my) / (da * da);
  double pa_d = 0.0;
  const double pa = pw(a, p.alpha, &pa_d);
  if (p.beta == p.gamma) {
    // c3 = c2/2 folds contrast and structure into one ratio.
    const double nb = 2 * cxy + p.c2, db = vx + vy + p.c2;
    const double bc = nb / db;
    double pb_d = 0.0;
    const double pb = pw(bc, p.beta, &pb_d);
    t.s = pa * pb;
    t.d_mu = pa_d * da_dmu * pb;
    t.d_var = pa * pb_d * (-nb / (db * db));
    t.d_cov = pa * pb_d * (2.0 / db);
    return t;
  }
  const double c3 = p.c2 / 2;
  const double sx = std::sqrt(std::max(vx, 0.0)), sy = std::sqrt(std::max(vy, 0.0));
  const double dsy = sy > 1e-12 ? 0.5 / sy : 0.0;
  const double nb = 2 * sx * sy + p.c2, db = vx + vy + p.c2;
  const double b = nb / db;
  const double db_dv = (2 * sx * dsy * db - nb) / (db * db);
  const double nc = cxy + c3, dc = sx * sy + c3;
  const double c = nc / dc;
  const double dc_dv = -nc * sx * dsy / (dc * dc);
  const double dc_dcov = 1.0 / dc;
  double pb_d = 0.0, pc_d = 0.0;
  const double pb = pw(b, p.beta, &pb_d);
  const double pc = pw(c, p.gamma, &pc_d);
  t.s = pa * pb * pc;
  t.d_mu = pa_d * da_dmu * pb * pc;
  t.d_var = pa * (pb_d * db_dv * pc + pb * pc_d * dc_dv);
  t.d_cov = pa * pb * pc_d * dc_dcov;
  return t;
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, ImageShape shape, const SSIMParams& p,
            std::vector<float>* grad_b) {
  p.validate();
  if (a.size() != shape.size() || b.size() != shape.size())
    throw DataError("ssim inputs do not match the image shape");
  const auto k = ssim_window(shape, p);
  const int h = shape.height, w = shape.width, ch = shape.channels;
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  const std::size_t plane = shape.pixels(), oplane = static_cast<std::size_t>(oh) * ow;
  const double norm = 1.0 / (static_cast<double>(oplane) * ch);

  std::vector<double> x(plane), y(plane), prod(plane), tmp(static_cast<std::size_t>(h) * w);
  std::vector<double> mx(oplane), my(oplane), exx(oplane), eyy(oplane), exy(oplane);
  std::vector<double> gm, gyy, gxy, adj;
  if (grad_b) {
    grad_b->assign(b.size(), 0.0f);
    gm.resize(oplane);
    gyy.resize(oplane);
    gxy.resize(oplane);
    adj.resize(plane);
  }
  double total = 0.0;
  for (int c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = a[i * ch + c];
      y[i] = b[i * ch + c];
    }
    filter_valid(x.data(), h, w, k, tmp.data(), mx.data());
    filter_valid(y.data(), h, w, k, tmp.data(), my.data());
    for (std::size_t i = 0; i < plane; ++i) prod[i] = x[i] * x[i];
    filter_valid(prod.data(), h, w, k, tmp.data(), exx.data());
    for (std::size_t i = 0; i < plane; ++i) prod[i] = y[i] * y[i];
    filter_valid(prod.data(), h, w, k, tmp.data(), eyy.data());
    for (std::size_t i = 0; i < plane; ++i) prod[i] = x[i] * y[i];
    filter_valid(prod.data(), h, w, k, tmp.data(), exy.data());

    for (std::size_t i = 0; i < oplane; ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double cxy = exy[i] - mx[i] * my[i];
      const WindowTerms t = window_ssim(mx[i], my[i], vx, vy, cxy, p);
      total += t.s;
      if (grad_b) {
        // Chain through var = E[y^2] - mu^2 and cov = E[xy] - mu_x mu_y.
        gm[i] = norm * (t.d_mu - 2 * my[i] * t.d_var - mx[i] * t.d_cov);
        gyy[i] = norm * t.d_var;
        gxy[i] = norm * t.d_cov;
      }
    }
    if (grad_b) {
      auto& g = *grad_b;
      filter_adjoint(gm.data(), h, w, k, tmp.data(), adj.data());
      for (std::size_t i = 0; i < plane; ++i) g[i * ch + c] += static_cast<float>(adj[i]);
      filter_adjoint(gyy.data(), h, w, k, tmp.data(), adj.data());
      for (std::size_t i = 0; i < plane; ++i) g[i * ch + c] += static_cast<float>(2 * y[i] * adj[i]);
      filter_adjoint(gxy.data(), h, w, k, tmp.data(), adj.data());
      for (std::size_t i = 0; i < plane; ++i) g[i * ch + c] += static_cast<float>(x[i] * adj[i]);
    }
  }
  return total / (static_cast<double>(oplane) * ch);
}

AsrCount asr_count(const Model& model, const ImageDataset& test, const TriggerSpec& trigger, int target,
                   AsrDenominator mode) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (mode == AsrDenominator::all || test.labels[i] != target) keep.push_back(i);
  AsrCount out;
  out.total = keep.size();
  if (keep.empty()) return out;
  const ImageDataset part = subset(test, keep);
  for (int pred : predict_dataset(model, part, &trigger))
    if (pred == target) ++out.hits;
  return out;
}

double asr(const Model& model, const ImageDataset& test, const TriggerSpec& trigger, int target,
           AsrDenominator mode) {
  const AsrCount c = asr_count(model, test, trigger, target, mode);
  if (c.total == 0) throw DataError("attack success rate has an empty denominator");
  return c.rate();
}

double cda(const Model& model, const ImageDataset& test) {
  if (test.size() == 0) throw DataError("clean accuracy over an empty set");
  return evaluate(model, test);
}

double mean_trigger_ssim(const ImageDataset& ds, const TriggerSpec& trigger, std::size_t max_samples,
                         const SSIMParams& p) {
  const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
  if (n == 0) throw DataError("ssim over an empty set");
  const ImageShape s = trigger.shape;
  std::vector<double> vals(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> img = ds.shape == s ? std::vector<float>(ds.image(i).begin(), ds.image(i).end())
                                           : resize_bilinear(ds.image(i), ds.shape, s.height, s.width);
    const auto trig = apply_trigger(img, s, trigger);
    vals[i] = ssim(img, trig, s, p);
  }
  double sum = 0.0;
  for (double v : vals) sum += v;
  return sum / static_cast<double>(n);
}

double feature_distance(std::span<const Tensor> fa, std::span<const Tensor> fb) {
  if (fa.size() != fb.size() || fa.empty()) throw DataError("feature stacks differ in depth");
  double total = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const Tensor& ta = fa[l];
    const Tensor& tb = fb[l];
    if (ta.shape() != tb.shape() || ta.rank() != 3) throw DataError("feature shapes differ");
    const int c = ta.dim(1), pos = ta.dim(2);
    double layer = 0.0;
    for (int q = 0; q < pos; ++q) {
      double na = 0.0, nb = 0.0;
      for (int k = 0; k < c; ++k) {
        const double va = ta[static_cast<std::size_t>(k) * pos + q], vb = tb[static_cast<std::size_t>(k) * pos + q];
        na += va * va;
        nb += vb * vb;
      }
      na = 1.0 / (std::sqrt(na) + 1e-10);
      nb = 1.0 / (std::sqrt(nb) + 1e-10);
      double d = 0.0;
      for (int k = 0; k < c; ++k) {
        const double e = ta[static_cast<std::size_t>(k) * pos + q] * na - tb[static_cast<std::size_t>(k) * pos + q] * nb;
        d += e * e;
      }
      layer += d;
    }
    total += layer / pos;
  }
  return total / static_cast<double>(fa.size());
}

double lpips_proxy(const Model& features, std::span<const float> a, std::span<const float> b,
                   ImageShape shape) {
  if (a.size() != shape.size() || b.size() != shape.size()) throw DataError("lpips inputs differ in shape");
  const ImageShape in = features.input_shape();
  std::vector<float> both;
  for (auto img : {a, b}) {
    const auto r = shape == in ? std::vector<float>(img.begin(), img.end())
                               : resize_bilinear(img, shape, in.height, in.width);
    both.insert(both.end(), r.begin(), r.end());
  }
  Tape tape;
  features.forward(Tensor({2, in.height, in.width, in.channels}, std::move(both)), &tape);
  const auto feats = features.perceptual_features(tape);
  std::vector<Tensor> fa, fb;
  for (const auto& f : feats) {
    const int c = f.dim(1), pos = f.dim(2);
    fa.emplace_back(std::vector<int>{1, c, pos}, std::vector<float>(f.row(0).begin(), f.row(0).end()));
    fb.emplace_back(std::vector<int>{1, c, pos}, std::vector<float>(f.row(1).begin(), f.row(1).end()));
  }
  return feature_distance(fa, fb);
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

MetricRecord make_metric(std::string name, double value, std::string dataset, std::string model,
                         std::string trigger) {
  if (!std::isfinite(value)) throw DataError("metric " + name + " is not finite");
  if ((name == "asr" || name == "cda") && (value < 0.0 || value > 1.0))
    throw DataError("metric " + name + " outside [0,1]");
  if (name == "ssim") value = std::clamp(value, 0.0, 1.0);
  return {std::move(name), value, std::move(dataset), std::move(model), std::move(trigger), iso_timestamp()};
}

void append_metric_csv(const std::filesystem::path& file, const MetricRecord& r) {
  const bool fresh = !std::filesystem::exists(file);
  std::ofstream f(file, std::ios::app);
  if (!f) throw DataError("cannot append to " + file.string());
  if (fresh) f << "name,value,dataset,model,trigger,timestamp\n";
  f << r.name << ',' << std::setprecision(10) << r.value << ',' << r.dataset << ',' << r.model << ','
    << r.trigger << ',' << r.timestamp << '\n';
}

void write_metrics_json(const std::filesystem::path& file, std::span<const MetricRecord> records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records)
    j.push_back({{"name", r.name},
                 {"value", r.value},
                 {"dataset", r.dataset},
                 {"model", r.model},
                 {"trigger", r.trigger},
                 {"timestamp", r.timestamp}});
  std::ofstream f(file);
  if (!f) throw DataError("cannot write " + file.string());
  f << j.dump(2) << '\n';
}

std::vector<MetricRecord> read_metrics_json(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw DataError("missing metrics file " + file.string());
  std::vector<MetricRecord> out;
  try {
    nlohmann::json j;
    f >> j;
    for (const auto& r : j)
      out.push_back({r.at("name"), r.at("value"), r.value("dataset", ""), r.value("model", ""),
                     r.value("trigger", ""), r.value("timestamp", "")});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed metrics file " + file.string() + ": " + e.what());
  }
  return out;
}

}  // namespace qoebd
