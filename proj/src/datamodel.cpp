#include "sed/datamodel.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "sed/error.hpp"

namespace sed {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void fail_at(const std::filesystem::path& file, std::size_t line,
                          const std::string& msg) {
  throw ConfigError(file.string() + ":" + std::to_string(line) + ": " + msg);
}

std::filesystem::path sidecar_path(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p.replace_extension(".json");
  return p;
}

std::string format_seconds(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  // trim trailing zeros but keep at least one decimal
  std::string s(buf);
  while (s.size() > 1 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
  return s;
}

}  // namespace

std::optional<std::size_t> ClassVocabulary::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

void ClassVocabulary::validate() const {
  if (names.empty()) throw ConfigError("class vocabulary is empty");
  std::unordered_set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty()) throw ConfigError("class vocabulary contains an empty name");
    if (!seen.insert(n).second)
      throw ConfigError("duplicate class name '" + n + "'");
  }
}

std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::weak: return "weak";
    case SourceKind::synthetic: return "synthetic";
    case SourceKind::unlabeled: return "unlabeled";
    case SourceKind::separated: return "separated";
  }
  return "?";
}

SourceKind source_from_string(std::string_view s) {
  if (s == "weak") return SourceKind::weak;
  if (s == "synthetic") return SourceKind::synthetic;
  if (s == "unlabeled") return SourceKind::unlabeled;
  if (s == "separated") return SourceKind::separated;
  throw ConfigError("unknown source kind '" + std::string(s) + "'");
}

void EventList::validate(std::size_t num_classes) const {
  for (const auto& e : items) {
    if (e.class_index >= num_classes)
      throw ConfigError("event class index " + std::to_string(e.class_index) +
                        " out of range (C=" + std::to_string(num_classes) + ")");
    if (!(e.offset > e.onset))
      throw ConfigError("event offset must exceed onset (got " +
                        std::to_string(e.onset) + ".." +
                        std::to_string(e.offset) + ")");
    if (e.onset < 0.0) throw ConfigError("event onset must be >= 0");
  }
}

std::filesystem::path DatasetManifest::feature_file(std::size_t entry_index) const {
  std::filesystem::path p = entries[entry_index].feature_path;
  if (p.is_absolute()) return p;
  return base_dir / p;
}

namespace {

std::optional<WeakLabelVec> parse_weak_labels(const std::string& field,
                                              const ClassVocabulary& vocab,
                                              const std::filesystem::path& file,
                                              std::size_t line) {
  WeakLabelVec v;
  v.values.assign(vocab.size(), 0);
  if (field.empty()) return v;
  for (const auto& name : split(field, ',')) {
    auto idx = vocab.index_of(name);
    if (!idx) fail_at(file, line, "unknown class name '" + name + "'");
    v.values[*idx] = 1;
  }
  return v;
}

std::optional<EventList> parse_events(const std::string& field,
                                      const ClassVocabulary& vocab,
                                      const std::filesystem::path& file,
                                      std::size_t line) {
  EventList ev;
  if (field.empty()) return ev;
  for (const auto& item : split(field, ';')) {
    auto parts = split(item, ':');
    if (parts.size() != 3)
      fail_at(file, line, "bad event triple '" + item + "' (want class:onset:offset)");
    auto idx = vocab.index_of(parts[0]);
    if (!idx) fail_at(file, line, "unknown class name '" + parts[0] + "'");
    double onset = 0.0, offset = 0.0;
    try {
      onset = std::stod(parts[1]);
      offset = std::stod(parts[2]);
    } catch (const std::exception&) {
      fail_at(file, line, "bad onset/offset in '" + item + "'");
    }
    if (!(offset > onset))
      fail_at(file, line, "event offset must exceed onset in '" + item + "'");
    if (onset < 0.0) fail_at(file, line, "event onset must be >= 0 in '" + item + "'");
    ev.items.push_back(Event{*idx, onset, offset});
  }
  return ev;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  std::ifstream sf(side);
  if (!sf) throw ConfigError("cannot open manifest sidecar " + side.string());
  nlohmann::json j;
  try {
    sf >> j;
  } catch (const std::exception& e) {
    throw ConfigError(side.string() + ": " + e.what());
  }

  DatasetManifest m;
  try {
    m.vocabulary.names = j.at("classes").get<std::vector<std::string>>();
    m.geometry.frames = j.at("frames").get<std::size_t>();
    m.geometry.bins = j.at("bins").get<std::size_t>();
    m.geometry.hop_seconds = j.at("hop_seconds").get<double>();
  } catch (const std::exception& e) {
    throw ConfigError(side.string() + ": " + e.what());
  }
  m.vocabulary.validate();
  if (m.geometry.frames == 0 || m.geometry.bins == 0 ||
      m.geometry.hop_seconds <= 0.0)
    throw ConfigError(side.string() + ": bad feature geometry");

  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  m.base_dir = path.has_parent_path() ? path.parent_path()
                                      : std::filesystem::path(".");

  std::string lineText;
  std::size_t lineNo = 0;
  std::unordered_set<std::string> ids;
  while (std::getline(in, lineText)) {
    ++lineNo;
    if (!lineText.empty() && lineText.back() == '\r') lineText.pop_back();
    if (lineText.empty()) continue;
    auto fields = split(lineText, '\t');
    if (lineNo == 1) {
      if (fields.size() < 4 || fields[0] != "clip_id" ||
          fields[1] != "feature_path" || fields[2] != "source" ||
          fields[3] != "labels")
        fail_at(path, lineNo,
                "bad header, want 'clip_id\\tfeature_path\\tsource\\tlabels'");
      continue;
    }
    if (fields.size() == 3) fields.push_back("");
    if (fields.size() != 4)
      fail_at(path, lineNo, "expected 4 tab-separated fields, got " +
                                std::to_string(fields.size()));

    ManifestEntry e;
    e.clip_id = fields[0];
    e.feature_path = fields[1];
    if (e.clip_id.empty()) fail_at(path, lineNo, "empty clip_id");
    if (!ids.insert(e.clip_id).second)
      fail_at(path, lineNo, "duplicate clip_id '" + e.clip_id + "'");
    e.source = [&] {
      try {
        return source_from_string(fields[2]);
      } catch (const ConfigError& err) {
        fail_at(path, lineNo, err.what());
      }
    }();

    const std::string& labels = fields[3];
    switch (e.source) {
      case SourceKind::weak:
        e.weak_label = parse_weak_labels(labels, m.vocabulary, path, lineNo);
        break;
      case SourceKind::synthetic:
        e.events = parse_events(labels, m.vocabulary, path, lineNo);
        break;
      case SourceKind::unlabeled:
        if (!labels.empty())
          fail_at(path, lineNo, "unlabeled clip must not carry labels");
        break;
      case SourceKind::separated:
        // provenance tag only; accept any label payload
        if (labels.find(':') != std::string::npos)
          e.events = parse_events(labels, m.vocabulary, path, lineNo);
        else if (!labels.empty())
          e.weak_label = parse_weak_labels(labels, m.vocabulary, path, lineNo);
        break;
    }

    std::filesystem::path fp = e.feature_path;
    if (!fp.is_absolute()) fp = m.base_dir / fp;
    if (!std::filesystem::exists(fp))
      fail_at(path, lineNo, "feature file not found: " + fp.string());

    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path) {
  nlohmann::json j;
  j["classes"] = manifest.vocabulary.names;
  j["frames"] = manifest.geometry.frames;
  j["bins"] = manifest.geometry.bins;
  j["hop_seconds"] = manifest.geometry.hop_seconds;
  {
    std::ofstream sf(sidecar_path(path));
    if (!sf) throw Error("cannot write sidecar for " + path.string());
    sf << j.dump(2) << "\n";
  }

  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  out << "clip_id\tfeature_path\tsource\tlabels\n";
  for (const auto& e : manifest.entries) {
    std::string labels;
    if (e.events && !e.events->items.empty()) {
      bool first = true;
      for (const auto& ev : e.events->items) {
        if (!first) labels += ';';
        first = false;
        labels += manifest.vocabulary.names[ev.class_index] + ':' +
                  format_seconds(ev.onset) + ':' + format_seconds(ev.offset);
      }
    } else if (e.weak_label) {
      bool first = true;
      for (std::size_t c = 0; c < e.weak_label->values.size(); ++c) {
        if (!e.weak_label->values[c]) continue;
        if (!first) labels += ',';
        first = false;
        labels += manifest.vocabulary.names[c];
      }
    }
    out << e.clip_id << '\t' << e.feature_path << '\t' << to_string(e.source)
        << '\t' << labels << '\n';
  }
}

Tensor load_feature(const std::filesystem::path& path,
                    const FeatureGeometry& geometry) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file " + path.string());
  const std::size_t n = geometry.frames * geometry.bins;
  std::vector<float> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
    throw Error("feature file " + path.string() + " smaller than " +
                std::to_string(geometry.frames) + "x" +
                std::to_string(geometry.bins));
  in.peek();
  if (!in.eof())
    throw Error("feature file " + path.string() + " larger than expected");

  Tensor t({geometry.frames, geometry.bins});
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(raw[i]))
      throw Error("non-finite value in feature file " + path.string());
    t(i) = static_cast<double>(raw[i]);
  }
  return t;
}

void save_feature(const Tensor& feature, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write feature file " + path.string());
  std::vector<float> raw(feature.size());
  for (std::size_t i = 0; i < feature.size(); ++i)
    raw[i] = static_cast<float>(feature(i));
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

ClipRecord load_clip(const DatasetManifest& manifest, std::size_t entry_index) {
  const auto& e = manifest.entries[entry_index];
  ClipRecord r;
  r.clip_id = e.clip_id;
  r.source = e.source;
  r.weak_label = e.weak_label;
  r.events = e.events;
  r.feature = load_feature(manifest.feature_file(entry_index), manifest.geometry);
  return r;
}

WeakLabelVec weak_from_strong(const EventList& events, std::size_t num_classes) {
  WeakLabelVec v;
  v.values.assign(num_classes, 0);
  for (const auto& e : events.items) {
    if (e.class_index >= num_classes)
      throw Error("event class index " + std::to_string(e.class_index) +
                  " out of range (C=" + std::to_string(num_classes) + ")");
    v.values[e.class_index] = 1;
  }
  return v;
}

StrongLabelGrid events_to_frame_grid(const EventList& events,
                                     std::size_t frames, double frame_rate,
                                     std::size_t num_classes) {
  if (frame_rate <= 0.0) throw Error("frame_rate must be positive");
  StrongLabelGrid g;
  g.frames = frames;
  g.classes = num_classes;
  g.frame_rate = frame_rate;
  g.values.assign(frames * num_classes, 0);

  const double duration = static_cast<double>(frames) / frame_rate;
  std::size_t clipped = 0;
  for (const auto& e : events.items) {
    if (e.class_index >= num_classes)
      throw Error("event class index out of range in frame grid");
    if (e.offset > duration + 1e-9) ++clipped;
    // frame t covers [t/rate, (t+1)/rate); mark on any overlap
    const auto first =
        static_cast<std::size_t>(std::max(0.0, std::floor(e.onset * frame_rate)));
    for (std::size_t t = first; t < frames; ++t) {
      const double lo = static_cast<double>(t) / frame_rate;
      const double hi = static_cast<double>(t + 1) / frame_rate;
      if (lo >= e.offset) break;
      if (hi > e.onset) g.at(t, e.class_index) = 1;
    }
  }
  if (clipped > 0)
    std::cerr << "warning: " << clipped
              << " event(s) extend past the clip and were clipped to "
              << frames << " frames\n";
  return g;
}

}  // namespace sed
