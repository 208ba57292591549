#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sed/datamodel.hpp"
#include "sed/nets.hpp"

namespace sed {

// Main/auxiliary fusion of instance-level probabilities:
// alpha * P_GAP + (1 - alpha) * P_ATP.
struct FusionSpec {
  double alpha = 0.5;
  bool enabled = false;

  void validate() const;
};

struct DecodeSpec {
  double clip_threshold = 0.5;
  double frame_threshold = 0.5;
  std::size_t median_window = 1;  // odd; 1 = off
  double frame_rate = 0.0;        // frames per second at detector resolution

  void validate() const;
};

Tensor fuse_branches(const Tensor& frame_probs_atp,
                     const Tensor& frame_probs_gap, const FusionSpec& spec);

// Per class: clip-probability gate, frame thresholding, odd median filter
// (replicate padding), one event per maximal run of positives.
EventList decode_events(const Tensor& frame_probs /*T' x C*/,
                        std::span<const double> clip_probs,
                        const DecodeSpec& spec);

// A prediction directory: frame_probs.bin + clip_probs.bin (raw little-endian
// float32) with index.json describing geometry and per-clip offsets, plus
// events.tsv with the decoded events.
struct PredictionSet {
  std::vector<std::string> clip_ids;  // sorted
  std::vector<std::string> class_names;
  std::size_t frames = 0;   // T'
  std::size_t classes = 0;  // C
  double frame_rate = 0.0;
  std::vector<float> frame_probs;  // n_clips x T' x C
  std::vector<float> clip_probs;   // n_clips x C

  std::size_t clip_count() const { return clip_ids.size(); }

  void save(const std::filesystem::path& dir) const;
  static PredictionSet load(const std::filesystem::path& dir);
};

// Event TSV: clip_id <TAB> onset <TAB> offset <TAB> class_name, three
// decimals, no header.
void write_events_tsv(const std::filesystem::path& path,
                      const std::vector<std::string>& clip_ids,
                      const std::vector<EventList>& events,
                      const std::vector<std::string>& class_names);

struct PredictSpecs {
  FusionSpec fusion;
  DecodeSpec decode;  // frame_rate 0 = derive from manifest geometry
};

// Runs the model over every manifest clip (ordered by clip_id), writes raw
// probabilities for ensembling and decoded events for evaluation.
void predict(const Model& model, const DatasetManifest& manifest,
             const PredictSpecs& specs, const std::filesystem::path& out_dir);

// Decode an existing PredictionSet into per-clip event lists (used after
// ensembling).
std::vector<EventList> decode_prediction_set(const PredictionSet& preds,
                                             const DecodeSpec& spec);

}  // namespace sed
