#include "sed/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "sed/error.hpp"

namespace sed {

void FusionSpec::validate() const {
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("fusion alpha must be in [0, 1]");
}

void DecodeSpec::validate() const {
  if (median_window % 2 == 0)
    throw ConfigError("median window must be odd");
  if (frame_rate <= 0.0) throw ConfigError("decode frame_rate must be positive");
}

Tensor fuse_branches(const Tensor& frame_probs_atp,
                     const Tensor& frame_probs_gap, const FusionSpec& spec) {
  spec.validate();
  if (!frame_probs_atp.same_shape(frame_probs_gap))
    throw Error("fuse_branches: shape mismatch");
  Tensor out(frame_probs_atp.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out(i) = spec.alpha * frame_probs_gap(i) +
             (1.0 - spec.alpha) * frame_probs_atp(i);
  return out;
}

namespace {

// Odd-width median of a binary sequence with replicate padding; for binary
// input the median is a majority vote over the window.
void median_filter_binary(std::vector<std::uint8_t>& seq, std::size_t window) {
  if (window <= 1 || seq.empty()) return;
  const std::size_t half = window / 2;
  const std::size_t n = seq.size();
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < window; ++j) {
      const std::int64_t idx =
          std::clamp<std::int64_t>(static_cast<std::int64_t>(i + j) -
                                       static_cast<std::int64_t>(half),
                                   0, static_cast<std::int64_t>(n) - 1);
      ones += seq[static_cast<std::size_t>(idx)];
    }
    out[i] = ones * 2 > window ? 1 : 0;
  }
  seq = std::move(out);
}

}  // namespace

EventList decode_events(const Tensor& frame_probs,
                        std::span<const double> clip_probs,
                        const DecodeSpec& spec) {
  spec.validate();
  const std::size_t T = frame_probs.dim(0), C = frame_probs.dim(1);
  if (clip_probs.size() != C)
    throw Error("decode_events: clip probability length mismatch");

  EventList events;
  for (std::size_t c = 0; c < C; ++c) {
    if (clip_probs[c] < spec.clip_threshold) continue;
    std::vector<std::uint8_t> active(T);
    for (std::size_t t = 0; t < T; ++t)
      active[t] = frame_probs(t, c) >= spec.frame_threshold ? 1 : 0;
    median_filter_binary(active, spec.median_window);

    std::size_t t = 0;
    while (t < T) {
      if (!active[t]) {
        ++t;
        continue;
      }
      std::size_t end = t;
      while (end + 1 < T && active[end + 1]) ++end;
      events.items.push_back(
          Event{c, static_cast<double>(t) / spec.frame_rate,
                static_cast<double>(end + 1) / spec.frame_rate});
      t = end + 1;
    }
  }
  return events;
}

// ---------------------------------------------------------------------------
// PredictionSet I/O
// ---------------------------------------------------------------------------

namespace {

void write_floats(const std::filesystem::path& path,
                  const std::vector<float>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

std::vector<float> read_floats(const std::filesystem::path& path,
                               std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<float> data(expected);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(expected * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(float))
    throw Error("file " + path.string() + " has unexpected size");
  return data;
}

}  // namespace

void PredictionSet::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json j;
  j["class_names"] = class_names;
  j["frames"] = frames;
  j["classes"] = classes;
  j["frame_rate"] = frame_rate;
  auto clips = nlohmann::json::object();
  const std::size_t frame_stride = frames * classes;
  for (std::size_t i = 0; i < clip_ids.size(); ++i) {
    clips[clip_ids[i]] = {
        {"offset", i * frame_stride * sizeof(float)},
        {"shape", {frames, classes}},
    };
  }
  j["clips"] = clips;
  j["clip_order"] = clip_ids;
  {
    std::ofstream out(dir / "index.json");
    if (!out) throw Error("cannot write index in " + dir.string());
    out << j.dump(2) << "\n";
  }
  write_floats(dir / "frame_probs.bin", frame_probs);
  write_floats(dir / "clip_probs.bin", clip_probs);
}

PredictionSet PredictionSet::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw Error("cannot open prediction index in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error(dir.string() + "/index.json: " + e.what());
  }
  PredictionSet p;
  p.class_names = j.at("class_names").get<std::vector<std::string>>();
  p.frames = j.at("frames").get<std::size_t>();
  p.classes = j.at("classes").get<std::size_t>();
  p.frame_rate = j.at("frame_rate").get<double>();
  p.clip_ids = j.at("clip_order").get<std::vector<std::string>>();
  if (!std::is_sorted(p.clip_ids.begin(), p.clip_ids.end()))
    throw Error("prediction clip order is not sorted in " + dir.string());
  p.frame_probs = read_floats(dir / "frame_probs.bin",
                              p.clip_ids.size() * p.frames * p.classes);
  p.clip_probs =
      read_floats(dir / "clip_probs.bin", p.clip_ids.size() * p.classes);
  return p;
}

void write_events_tsv(const std::filesystem::path& path,
                      const std::vector<std::string>& clip_ids,
                      const std::vector<EventList>& events,
                      const std::vector<std::string>& class_names) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char buf[256];
  for (std::size_t i = 0; i < clip_ids.size(); ++i) {
    // sort events of one clip by onset, then class, for stable output
    EventList sorted = events[i];
    std::sort(sorted.items.begin(), sorted.items.end(),
              [](const Event& a, const Event& b) {
                if (a.onset != b.onset) return a.onset < b.onset;
                if (a.class_index != b.class_index)
                  return a.class_index < b.class_index;
                return a.offset < b.offset;
              });
    for (const auto& e : sorted.items) {
      std::snprintf(buf, sizeof(buf), "%s\t%.3f\t%.3f\t%s\n",
                    clip_ids[i].c_str(), e.onset, e.offset,
                    class_names[e.class_index].c_str());
      out << buf;
    }
  }
}

void predict(const Model& model, const DatasetManifest& manifest,
             const PredictSpecs& specs, const std::filesystem::path& out_dir) {
  specs.fusion.validate();
  if (specs.fusion.enabled &&
      (!model.config().has_auxiliary() ||
       model.config().auxiliary_kind() != BranchKind::instance_average))
    throw ConfigError(
        "branch fusion requires an instance-average auxiliary branch");

  const std::size_t T = manifest.geometry.frames;
  const std::size_t To = model.output_frames(T);
  const std::size_t C = model.classes();

  DecodeSpec decode = specs.decode;
  if (decode.frame_rate <= 0.0)
    decode.frame_rate =
        1.0 / (manifest.geometry.hop_seconds *
               static_cast<double>(model.config().encoder.time_pool_product()));
  decode.validate();

  // deterministic output order
  std::vector<std::size_t> order(manifest.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return manifest.entries[a].clip_id < manifest.entries[b].clip_id;
  });

  PredictionSet out;
  out.class_names = manifest.vocabulary.names;
  out.frames = To;
  out.classes = C;
  out.frame_rate = decode.frame_rate;
  out.frame_probs.resize(order.size() * To * C);
  out.clip_probs.resize(order.size() * C);

  std::vector<EventList> all_events(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    ClipRecord clip = load_clip(manifest, order[i]);
    out.clip_ids.push_back(clip.clip_id);

    Tensor feats({1, T, manifest.geometry.bins});
    std::copy(clip.feature.values().begin(), clip.feature.values().end(),
              feats.values().begin());
    PredictionBundle bundle = model.forward(feats);

    // detection probabilities: main branch, optionally fused with I-GAP
    Tensor frame({To, C});
    std::vector<double> clipv(C);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t c = 0; c < C; ++c)
        frame(t, c) = bundle.main_frame(0, t, c);
    for (std::size_t c = 0; c < C; ++c) clipv[c] = bundle.main_clip(0, c);
    if (specs.fusion.enabled) {
      const double a = specs.fusion.alpha;
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t c = 0; c < C; ++c)
          frame(t, c) = a * (*bundle.aux_frame)(0, t, c) +
                        (1.0 - a) * frame(t, c);
      for (std::size_t c = 0; c < C; ++c)
        clipv[c] = a * (*bundle.aux_clip)(0, c) + (1.0 - a) * clipv[c];
    }

    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t c = 0; c < C; ++c)
        out.frame_probs[(i * To + t) * C + c] = static_cast<float>(frame(t, c));
    for (std::size_t c = 0; c < C; ++c)
      out.clip_probs[i * C + c] = static_cast<float>(clipv[c]);

    all_events[i] = decode_events(frame, clipv, decode);
  }

  out.save(out_dir);
  write_events_tsv(out_dir / "events.tsv", out.clip_ids, all_events,
                   out.class_names);
}

std::vector<EventList> decode_prediction_set(const PredictionSet& preds,
                                             const DecodeSpec& spec) {
  std::vector<EventList> out(preds.clip_count());
  const std::size_t To = preds.frames, C = preds.classes;
  for (std::size_t i = 0; i < preds.clip_count(); ++i) {
    Tensor frame({To, C});
    std::vector<double> clipv(C);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t c = 0; c < C; ++c)
        frame(t, c) = preds.frame_probs[(i * To + t) * C + c];
    for (std::size_t c = 0; c < C; ++c)
      clipv[c] = preds.clip_probs[i * C + c];
    out[i] = decode_events(frame, clipv, spec);
  }
  return out;
}

}  // namespace sed
