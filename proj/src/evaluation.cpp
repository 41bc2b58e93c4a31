#include "gaitstr/evaluation.hpp"

#include "gaitstr/errors.hpp"
#include "gaitstr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace gaitstr {

namespace fs = std::filesystem;

void FeatureIndex::add(const Tensor& feature, int label, std::string view, std::string condition) {
  const auto d = static_cast<Eigen::Index>(feature.size());
  if (size() > 0 && d != features.cols())
    throw InvalidInput("feature width " + std::to_string(d) + " differs from index width " +
                       std::to_string(features.cols()));
  features.conservativeResize(size() + 1, d);
  features.row(size()) = Eigen::Map<const Eigen::RowVectorXd>(feature.data(), d);
  labels.push_back(label);
  views.push_back(std::move(view));
  conditions.push_back(std::move(condition));
}

FeatureIndex FeatureIndex::select(const std::vector<int>& rows) const {
  FeatureIndex out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(rows[i]);
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    out.labels.push_back(labels[r]);
    out.views.push_back(views[r]);
    out.conditions.push_back(conditions[r]);
  }
  return out;
}

void FeatureIndex::validate() const {
  const auto n = static_cast<std::size_t>(size());
  if (static_cast<std::size_t>(features.rows()) != n || views.size() != n || conditions.size() != n)
    throw InvalidInput("feature index arrays have different lengths");
  if (!features.allFinite()) throw InvalidInput("feature index contains non-finite values");
}

Rankings l2_retrieve(const FeatureIndex& probe, const FeatureIndex& gallery) {
  probe.validate();
  gallery.validate();
  if (gallery.size() == 0) throw ProtocolError("empty gallery");
  if (probe.size() > 0 && probe.features.cols() != gallery.features.cols())
    throw InvalidInput("probe and gallery feature widths differ");
  Rankings out(static_cast<std::size_t>(probe.size()));
  std::vector<double> d(static_cast<std::size_t>(gallery.size()));
  for (int p = 0; p < probe.size(); ++p) {
    for (int g = 0; g < gallery.size(); ++g)
      d[static_cast<std::size_t>(g)] = (probe.features.row(p) - gallery.features.row(g)).norm();
    auto& order = out[static_cast<std::size_t>(p)];
    order.resize(static_cast<std::size_t>(gallery.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return d[static_cast<std::size_t>(a)] < d[static_cast<std::size_t>(b)]; });
  }
  return out;
}

double rank_k(const Rankings& rankings, const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
              int k) {
  if (k < 1) throw InvalidInput("rank_k needs k >= 1");
  if (rankings.size() != probe_labels.size()) throw InvalidInput("rank_k: rankings and probe labels differ in length");
  if (rankings.empty()) return 0.0;
  int hits = 0;
  for (std::size_t p = 0; p < rankings.size(); ++p) {
    const auto& r = rankings[p];
    const std::size_t n = std::min(r.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i)
      if (gallery_labels[static_cast<std::size_t>(r[i])] == probe_labels[p]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

MapMinp map_minp(const Rankings& rankings, const std::vector<int>& probe_labels,
                 const std::vector<int>& gallery_labels) {
  if (rankings.size() != probe_labels.size()) throw InvalidInput("map_minp: rankings and probe labels differ in length");
  MapMinp out;
  double ap_sum = 0.0, inp_sum = 0.0;
  for (std::size_t p = 0; p < rankings.size(); ++p) {
    int matches = 0, last_rank = 0;
    double precision_sum = 0.0;
    const auto& r = rankings[p];
    for (std::size_t i = 0; i < r.size(); ++i)
      if (gallery_labels[static_cast<std::size_t>(r[i])] == probe_labels[p]) {
        ++matches;
        last_rank = static_cast<int>(i) + 1;
        precision_sum += static_cast<double>(matches) / last_rank;
      }
    if (matches == 0) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    ap_sum += precision_sum / matches;
    inp_sum += static_cast<double>(matches) / last_rank;
  }
  if (out.evaluated > 0) {
    out.map = ap_sum / out.evaluated;
    out.minp = inp_sum / out.evaluated;
  }
  return out;
}

ViewMatrix view_matrix_eval(const FeatureIndex& probe, const FeatureIndex& gallery,
                            const std::vector<std::string>& views) {
  if (views.size() < 2) throw ProtocolError("view matrix needs at least two views");
  ViewMatrix m;
  m.views = views;
  const std::size_t nv = views.size();
  m.cells.assign(nv, std::vector<double>(nv, std::numeric_limits<double>::quiet_NaN()));
  double grand = 0.0;
  int cells = 0;
  for (std::size_t pv = 0; pv < nv; ++pv) {
    std::vector<int> prows;
    for (int i = 0; i < probe.size(); ++i)
      if (probe.views[static_cast<std::size_t>(i)] == views[pv]) prows.push_back(i);
    if (prows.empty()) throw ProtocolError("no probes with view " + views[pv]);
    const FeatureIndex p = probe.select(prows);
    double row = 0.0;
    for (std::size_t gv = 0; gv < nv; ++gv) {
      if (gv == pv) continue;
      std::vector<int> grows;
      for (int i = 0; i < gallery.size(); ++i)
        if (gallery.views[static_cast<std::size_t>(i)] == views[gv]) grows.push_back(i);
      if (grows.empty())
        throw ProtocolError("empty gallery for probe view " + views[pv] + " vs gallery view " + views[gv]);
      const FeatureIndex g = gallery.select(grows);
      const double r1 = rank_k(l2_retrieve(p, g), p.labels, g.labels, 1);
      m.cells[pv][gv] = r1;
      row += r1;
      grand += r1;
      ++cells;
    }
    m.row_means.push_back(row / static_cast<double>(nv - 1));
  }
  m.grand_mean = grand / cells;
  return m;
}

RetrievalReport evaluate_retrieval(const FeatureIndex& probe, const FeatureIndex& gallery) {
  RetrievalReport r;
  r.rankings = l2_retrieve(probe, gallery);
  for (int k : {1, 5, 10, 20}) r.rank[k] = rank_k(r.rankings, probe.labels, gallery.labels, k);
  r.map = map_minp(r.rankings, probe.labels, gallery.labels);
  r.probes = probe.size();
  r.gallery = gallery.size();
  return r;
}

namespace {

std::ofstream open_csv(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_report_csv(const fs::path& path, const RetrievalReport& report) {
  auto out = open_csv(path);
  out << "metric,value\n";
  for (const auto& [k, v] : report.rank) out << "rank" << k << ',' << fmt(v) << '\n';
  out << "mAP," << fmt(report.map.map) << '\n';
  out << "mINP," << fmt(report.map.minp) << '\n';
  out << "probes," << report.probes << '\n';
  out << "gallery," << report.gallery << '\n';
  out << "excluded_probes," << report.map.excluded << '\n';
  if (report.view_matrix) out << "view_mean_rank1," << fmt(report.view_matrix->grand_mean) << '\n';
}

void write_view_matrix_csv(const fs::path& path, const ViewMatrix& m) {
  auto out = open_csv(path);
  out << "probe_view";
  for (const auto& v : m.views) out << ',' << v;
  out << ",mean\n";
  for (std::size_t p = 0; p < m.views.size(); ++p) {
    out << m.views[p];
    for (std::size_t g = 0; g < m.views.size(); ++g) out << ',' << (p == g ? std::string("") : fmt(m.cells[p][g]));
    out << ',' << fmt(m.row_means[p]) << '\n';
  }
  out << "mean";
  for (std::size_t g = 0; g < m.views.size(); ++g) out << ',';
  out << ',' << fmt(m.grand_mean) << '\n';
}

double mpjpe(const JointSequence& pred, const JointSequence& ref) {
  if (pred.frames() != ref.frames() || pred.points() != ref.points())
    throw InvalidInput("mpjpe: shapes differ ([" + std::to_string(pred.frames()) + "," + std::to_string(pred.points()) +
                       "] vs [" + std::to_string(ref.frames()) + "," + std::to_string(ref.points()) + "])");
  if (pred.frames() == 0 || pred.points() == 0) return 0.0;
  double sum = 0.0;
  for (int f = 0; f < pred.frames(); ++f)
    for (int k = 0; k < pred.points(); ++k) sum += std::hypot(pred.x(f, k) - ref.x(f, k), pred.y(f, k) - ref.y(f, k));
  return sum / (static_cast<double>(pred.frames()) * pred.points());
}

// --- model-driven evaluation ----------------------------------------------------------------

Protocol parse_protocol(std::string_view s) {
  if (s == "simple") return Protocol::simple;
  if (s == "view_matrix") return Protocol::view_matrix;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (simple|view_matrix)");
}

namespace {

std::vector<int> eval_frame_indices(const GaitSample& s, const EvalOptions& o) {
  return select_frame_indices(s.joints.frames(), o.frames, o.selection);
}

}  // namespace

JointSequence eval_joints(const GaitSample& sample, const EvalOptions& options) {
  JointSequence j = take_frames(sample.joints, eval_frame_indices(sample, options));
  if (options.jitter_rate > 0.0)
    j = inject_jitter(j, options.jitter_rate, options.jitter_magnitude,
                      derive_seed(options.jitter_seed, {static_cast<std::uint64_t>(sample.identity),
                                                        static_cast<std::uint64_t>(sample.sequence)}))
            .joints;
  return j;
}

FeatureIndex extract_features(const GaitStrModel& model, const std::vector<const GaitSample*>& samples,
                              const EvalOptions& options) {
  ad::NoGradGuard guard;
  FeatureIndex index;
  for (const auto* s : samples) {
    const auto idx = eval_frame_indices(*s, options);
    const EmbeddingBundle b = model.forward(make_input(s->silhouettes.take_frames(idx), eval_joints(*s, options)));
    index.add(b.feature->value, s->identity, s->view, std::string(condition_name(s->condition)));
  }
  return index;
}

RetrievalReport evaluate_protocol(const GaitStrModel& model, const Dataset& dataset, Protocol protocol,
                                  const EvalOptions& options) {
  std::vector<const GaitSample*> gallery, probes;
  for (const auto* s : dataset.test_samples()) (s->gallery ? gallery : probes).push_back(s);
  if (gallery.empty() || probes.empty()) throw ProtocolError("test split needs both gallery and probe sequences");
  const FeatureIndex g = extract_features(model, gallery, options);
  const FeatureIndex p = extract_features(model, probes, options);
  RetrievalReport r = evaluate_retrieval(p, g);
  if (protocol == Protocol::view_matrix) r.view_matrix = view_matrix_eval(p, g, dataset.spec.views);
  return r;
}

RefinementTable refinement_table(const GaitStrModel& model, const std::vector<const GaitSample*>& samples,
                                 const EvalOptions& options) {
  ad::NoGradGuard guard;
  RefinementTable t;
  for (const auto* s : samples) {
    const auto idx = eval_frame_indices(*s, options);
    const JointSequence clean = take_frames(s->joints, idx);
    const JointSequence noisy = eval_joints(*s, options);
    const RefinedStreams r = model.refine(make_input(s->silhouettes.take_frames(idx), noisy));
    const JointSequence refined = JointSequence::from_tensor(clean.topology(), r.joints->value);
    t.raw += mpjpe(noisy, clean);
    t.average += mpjpe(smooth_average(noisy, 3), clean);
    t.gaussian += mpjpe(smooth_gaussian(noisy, 3, 1.0), clean);
    t.refined += mpjpe(refined, clean);
    ++t.sequences;
  }
  if (t.sequences > 0) {
    t.raw /= t.sequences;
    t.average /= t.sequences;
    t.gaussian /= t.sequences;
    t.refined /= t.sequences;
  }
  return t;
}

void write_refinement_csv(const fs::path& path, const RefinementTable& t) {
  auto out = open_csv(path);
  out << "method,mpjpe\n";
  out << "raw," << fmt(t.raw) << '\n';
  out << "average_smoothing," << fmt(t.average) << '\n';
  out << "gaussian_smoothing," << fmt(t.gaussian) << '\n';
  out << "refined," << fmt(t.refined) << '\n';
}

}  // namespace gaitstr
