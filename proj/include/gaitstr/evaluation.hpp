#pragma once

#include "gaitstr/refinement.hpp"
#include "gaitstr/synthetic.hpp"
#include "gaitstr/tensor.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace gaitstr {

// Flattened recognition features with parallel metadata.
struct FeatureIndex {
  RowMatrix features;  // [n, D]
  std::vector<int> labels;
  std::vector<std::string> views;
  std::vector<std::string> conditions;

  int size() const { return static_cast<int>(labels.size()); }
  void add(const Tensor& feature, int label, std::string view = "090", std::string condition = "clean");
  // Subset in the given order.
  FeatureIndex select(const std::vector<int>& rows) const;
  void validate() const;
};

using Rankings = std::vector<std::vector<int>>;

// Gallery indices per probe by ascending Euclidean distance; ties go to the
// lower gallery index.
Rankings l2_retrieve(const FeatureIndex& probe, const FeatureIndex& gallery);
// Fraction of probes whose first k ranked entries contain their label.
double rank_k(const Rankings& rankings, const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
              int k);

struct MapMinp {
  double map = 0.0;
  double minp = 0.0;
  int evaluated = 0;
  int excluded = 0;  // probes without any gallery match
};
MapMinp map_minp(const Rankings& rankings, const std::vector<int>& probe_labels,
                 const std::vector<int>& gallery_labels);

struct ViewMatrix {
  std::vector<std::string> views;
  // cells[p][g]: rank-1 of probe view p against gallery view g; NaN on the diagonal.
  std::vector<std::vector<double>> cells;
  std::vector<double> row_means;
  double grand_mean = 0.0;
};
ViewMatrix view_matrix_eval(const FeatureIndex& probe, const FeatureIndex& gallery,
                            const std::vector<std::string>& views);

struct RetrievalReport {
  Rankings rankings;
  std::map<int, double> rank;  // k -> accuracy for k in {1, 5, 10, 20}
  MapMinp map;
  int probes = 0;
  int gallery = 0;
  std::optional<ViewMatrix> view_matrix;
};
RetrievalReport evaluate_retrieval(const FeatureIndex& probe, const FeatureIndex& gallery);
void write_report_csv(const std::filesystem::path& path, const RetrievalReport& report);
void write_view_matrix_csv(const std::filesystem::path& path, const ViewMatrix& matrix);

// Mean Euclidean distance between corresponding joints.
double mpjpe(const JointSequence& pred, const JointSequence& ref);

// --- model-driven evaluation ------------------------------------------------------
struct EvalOptions {
  int frames = 30;
  FrameSelection selection = FrameSelection::center;
  double jitter_rate = 0.0;  // corruption applied to skeletons before inference
  double jitter_magnitude = 0.1;
  std::uint64_t jitter_seed = 0;
};

// Input joints for one sample after frame selection and optional jitter.
JointSequence eval_joints(const GaitSample& sample, const EvalOptions& options);
FeatureIndex extract_features(const GaitStrModel& model, const std::vector<const GaitSample*>& samples,
                              const EvalOptions& options);

enum class Protocol { simple, view_matrix };
Protocol parse_protocol(std::string_view s);

// simple: test identities, gallery = gallery-role sequences, probes = the
// rest. view_matrix: same roles, scored per (probe view, gallery view) pair.
RetrievalReport evaluate_protocol(const GaitStrModel& model, const Dataset& dataset, Protocol protocol,
                                  const EvalOptions& options);

struct RefinementTable {
  double raw = 0.0, average = 0.0, gaussian = 0.0, refined = 0.0;
  int sequences = 0;
};
// MPJPE against the clean joints, averaged over sequences, for the jittered
// input, the two 3-frame smoothers and the model's refined joints.
RefinementTable refinement_table(const GaitStrModel& model, const std::vector<const GaitSample*>& samples,
                                 const EvalOptions& options);
void write_refinement_csv(const std::filesystem::path& path, const RefinementTable& table);

}  // namespace gaitstr
