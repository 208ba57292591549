#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sed/tensor.hpp"

namespace sed {

// Ordered class vocabulary; every label vector / probability matrix in the
// pipeline is indexed by it.
struct ClassVocabulary {
  std::vector<std::string> names;

  std::size_t size() const { return names.size(); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  void validate() const;  // unique, non-empty

  bool operator==(const ClassVocabulary&) const = default;
};

enum class SourceKind { weak, synthetic, unlabeled, separated };

std::string to_string(SourceKind k);
SourceKind source_from_string(std::string_view s);

struct Event {
  std::size_t class_index = 0;
  double onset = 0.0;   // seconds
  double offset = 0.0;  // seconds, > onset

  bool operator==(const Event&) const = default;
};

struct EventList {
  std::vector<Event> items;

  void validate(std::size_t num_classes) const;

  bool operator==(const EventList&) const = default;
};

struct WeakLabelVec {
  std::vector<std::uint8_t> values;  // {0,1}, length C

  bool operator==(const WeakLabelVec&) const = default;
};

// Binary frame-by-class grid at the detector's output resolution.
struct StrongLabelGrid {
  std::size_t frames = 0;
  std::size_t classes = 0;
  double frame_rate = 0.0;  // frames per second
  std::vector<std::uint8_t> values;  // row-major frames x classes

  std::uint8_t& at(std::size_t t, std::size_t c) { return values[t * classes + c]; }
  std::uint8_t at(std::size_t t, std::size_t c) const { return values[t * classes + c]; }

  bool operator==(const StrongLabelGrid&) const = default;
};

// Input feature geometry, shared by every clip of a dataset (from the
// manifest sidecar).
struct FeatureGeometry {
  std::size_t frames = 0;       // T
  std::size_t bins = 0;         // F
  double hop_seconds = 0.0;     // time per input frame

  double clip_seconds() const { return hop_seconds * static_cast<double>(frames); }

  bool operator==(const FeatureGeometry&) const = default;
};

struct ManifestEntry {
  std::string clip_id;
  std::string feature_path;  // as written in the manifest, relative to it
  SourceKind source = SourceKind::unlabeled;
  std::optional<WeakLabelVec> weak_label;
  std::optional<EventList> events;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  ClassVocabulary vocabulary;
  FeatureGeometry geometry;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;  // directory feature paths resolve against

  std::filesystem::path feature_file(std::size_t entry_index) const;
};

// One clip fully loaded into memory.
struct ClipRecord {
  std::string clip_id;
  Tensor feature;  // T x F
  SourceKind source = SourceKind::unlabeled;
  std::optional<WeakLabelVec> weak_label;
  std::optional<EventList> events;
};

// Manifest is a UTF-8 TSV (clip_id, feature_path, source, labels) with a
// JSON sidecar `<stem>.json` carrying the vocabulary and feature geometry.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path);

ClipRecord load_clip(const DatasetManifest& manifest, std::size_t entry_index);

// Raw little-endian float32, row-major T x F.
Tensor load_feature(const std::filesystem::path& path,
                    const FeatureGeometry& geometry);
void save_feature(const Tensor& feature, const std::filesystem::path& path);

// value[c] = 1 iff some event of class c appears.
WeakLabelVec weak_from_strong(const EventList& events, std::size_t num_classes);

// cell (t,c) = 1 iff frame [t/rate, (t+1)/rate) overlaps a class-c event.
// Events reaching past the last frame are clipped (with a warning).
StrongLabelGrid events_to_frame_grid(const EventList& events,
                                     std::size_t frames, double frame_rate,
                                     std::size_t num_classes);

}  // namespace sed
