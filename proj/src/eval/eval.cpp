#include "cofs/eval.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "cofs/geometry.hpp"

namespace cofs {

ClassHistogram class_histogram(std::span<const Layout> layouts, std::size_t num_classes) {
  ClassHistogram h{std::vector<double>(num_classes, 0.0)};
  std::size_t total = 0;
  for (const auto& l : layouts) {
    for (const auto& b : l.boxes) {
      if (b.cls >= num_classes) throw std::invalid_argument("class_histogram: class id out of range");
      h.probs[b.cls] += 1.0;
      ++total;
    }
  }
  if (total > 0)
    for (double& p : h.probs) p /= static_cast<double>(total);
  return h;
}

double class_kl(const ClassHistogram& gt, const ClassHistogram& gen, double eps) {
  if (gt.probs.size() != gen.probs.size()) throw std::invalid_argument("class_kl: histograms use different schemas");
  double kl = 0.0;
  for (std::size_t i = 0; i < gt.probs.size(); ++i) {
    kl += gt.probs[i] * std::log((gt.probs[i] + eps) / (gen.probs[i] + eps));
  }
  return kl;
}

bool has_overlap(const Layout& layout) {
  const auto& boxes = layout.boxes;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t j = i + 1; j < boxes.size(); ++j)
      if (footprint_overlap_area(boxes[i], boxes[j]) > kOverlapAreaTolerance) return true;
  return false;
}

bool has_center_outside(const Layout& layout) {
  for (const auto& b : layout.boxes)
    if (!layout.boundary.contains(b.t[0], b.t[2])) return true;
  return false;
}

Diagnostics diagnostics(std::span<const Layout> layouts) {
  Diagnostics d;
  if (layouts.empty()) return d;
  std::size_t overlaps = 0, outside = 0, objects = 0;
  for (const auto& l : layouts) {
    overlaps += has_overlap(l);
    outside += has_center_outside(l);
    objects += l.boxes.size();
  }
  const double n = static_cast<double>(layouts.size());
  d.overlap_rate = static_cast<double>(overlaps) / n;
  d.out_of_boundary_rate = static_cast<double>(outside) / n;
  d.mean_objects = static_cast<double>(objects) / n;
  return d;
}

std::string evaluation_report(std::span<const Layout> generated, std::span<const Layout> reference,
                              const ClassSchema& schema) {
  const ClassHistogram gen = class_histogram(generated, schema.size());
  const ClassHistogram ref = class_histogram(reference, schema.size());
  const Diagnostics d = diagnostics(generated);
  nlohmann::ordered_json j;
  j["generated"] = generated.size();
  j["reference"] = reference.size();
  j["classKL"] = class_kl(ref, gen);
  j["overlapRate"] = d.overlap_rate;
  j["outOfBoundaryRate"] = d.out_of_boundary_rate;
  j["meanObjectsPerLayout"] = d.mean_objects;
  nlohmann::ordered_json hist_gen, hist_ref;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    hist_gen[schema.label(i)] = gen.probs[i];
    hist_ref[schema.label(i)] = ref.probs[i];
  }
  j["histogramGenerated"] = hist_gen;
  j["histogramReference"] = hist_ref;
  return j.dump();
}

}  // namespace cofs
