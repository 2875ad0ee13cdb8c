#include "flatlab/io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace flatlab {

namespace fs = std::filesystem;

namespace {

template <class... Ts>
struct overloaded : Ts... {
	using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool is_primitive(const Json& j) { return !j.is_array() && !j.is_object(); }

void dump_into(std::string& out, const Json& j, int indent, int depth)
{
	const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
	const std::string close_pad(static_cast<std::size_t>(indent * depth), ' ');
	switch (j.type()) {
	case Json::value_t::number_float: {
		const double v = j.get<double>();
		out += std::isfinite(v) ? format_real(v) : "null";
		break;
	}
	case Json::value_t::array: {
		if (j.empty()) {
			out += "[]";
			break;
		}
		const bool inline_array = std::all_of(j.begin(), j.end(), is_primitive);
		out += "[";
		bool first = true;
		for (const auto& e : j) {
			out += first ? "" : ",";
			if (inline_array)
				out += first ? "" : " ";
			else
				out += "\n" + pad;
			dump_into(out, e, indent, depth + 1);
			first = false;
		}
		out += inline_array ? "]" : "\n" + close_pad + "]";
		break;
	}
	case Json::value_t::object: {
		if (j.empty()) {
			out += "{}";
			break;
		}
		out += "{";
		bool first = true;
		for (const auto& [k, v] : j.items()) {
			out += first ? "\n" : ",\n";
			out += pad + Json(k).dump() + ": ";
			dump_into(out, v, indent, depth + 1);
			first = false;
		}
		out += "\n" + close_pad + "}";
		break;
	}
	default:
		out += j.dump();
	}
}

// Checked accessors: every error names the key and the context.

void allow_keys(const Json& j, std::initializer_list<const char*> keys, const std::string& ctx)
{
	if (!j.is_object())
		throw InvalidInput(ctx + ": expected a JSON object");
	for (const auto& [k, _] : j.items())
		if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
			throw InvalidInput(ctx + ": unknown key '" + k + "'");
}

const Json& require(const Json& j, const char* key, const std::string& ctx)
{
	if (!j.contains(key))
		throw InvalidInput(ctx + ": missing key '" + key + "'");
	return j.at(key);
}

double as_number(const Json& j, const std::string& ctx)
{
	if (!j.is_number())
		throw InvalidInput(ctx + ": expected a number");
	return j.get<double>();
}

double number_at(const Json& j, const char* key, const std::string& ctx)
{
	return as_number(require(j, key, ctx), ctx + "." + key);
}

double number_or(const Json& j, const char* key, double fallback, const std::string& ctx)
{
	return j.contains(key) ? as_number(j.at(key), ctx + "." + key) : fallback;
}

std::uint64_t count_at(const Json& j, const std::string& ctx)
{
	if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
		throw InvalidInput(ctx + ": expected a non-negative integer");
	return j.get<std::uint64_t>();
}

std::uint64_t count_or(const Json& j, const char* key, std::uint64_t fallback, const std::string& ctx)
{
	return j.contains(key) ? count_at(j.at(key), ctx + "." + key) : fallback;
}

bool bool_or(const Json& j, const char* key, bool fallback, const std::string& ctx)
{
	if (!j.contains(key))
		return fallback;
	if (!j.at(key).is_boolean())
		throw InvalidInput(ctx + "." + key + ": expected true or false");
	return j.at(key).get<bool>();
}

std::string string_at(const Json& j, const char* key, const std::string& ctx)
{
	const Json& v = require(j, key, ctx);
	if (!v.is_string())
		throw InvalidInput(ctx + "." + key + ": expected a string");
	return v.get<std::string>();
}

Vector number_list(const Json& j, const std::string& ctx)
{
	if (!j.is_array())
		throw InvalidInput(ctx + ": expected an array of numbers");
	Vector out;
	for (const auto& e : j)
		out.push_back(as_number(e, ctx));
	return out;
}

Json number_array(std::span<const double> v) { return Json(Vector(v.begin(), v.end())); }

template <typename T, typename F>
Json measured_json(const Measured<T>& m, F&& convert)
{
	if (m.ok())
		return convert(*m.value);
	return Json{{"skipped", m.skipped}};
}

Json volume_json(const VolumeCertificate& c)
{
	Json j;
	j["valid"] = c.valid;
	j["r"] = c.r;
	j["r_shrinks"] = c.r_shrinks;
	j["alpha"] = c.alpha;
	j["per_box_volume"] = c.per_box_volume;
	j["boxes_checked"] = c.boxes_checked;
	j["disjointness_verified"] = c.disjointness_verified;
	j["volume_lower_bound"] = c.volume_lower_bound;
	j["box_volumes"] = number_array(c.box_volumes);
	j["max_loss_deviation"] = number_array(c.max_loss_deviation);
	j["failed_box"] = c.failed_box ? Json(*c.failed_box) : Json(nullptr);
	return j;
}

Architecture architecture_from_json(const Json& widths, bool bias, const std::string& ctx)
{
	Architecture arch;
	arch.use_bias = bias;
	if (widths.is_string())
		return parse_architecture(widths.get<std::string>(), bias);
	if (!widths.is_array())
		throw InvalidInput(ctx + ": expected an array of widths");
	for (const auto& w : widths)
		arch.layer_widths.push_back(count_at(w, ctx));
	arch.validate();
	return arch;
}

SharpnessConfig sharpness_from_json(const Json& j, const std::string& ctx)
{
	allow_keys(j, {"eps", "restarts", "steps", "step_size", "subspace_dim", "seed", "jobs"}, ctx);
	SharpnessConfig c;
	c.eps = number_or(j, "eps", c.eps, ctx);
	c.restarts = static_cast<int>(count_or(j, "restarts", c.restarts, ctx));
	c.steps = static_cast<int>(count_or(j, "steps", c.steps, ctx));
	c.step_size = number_or(j, "step_size", c.step_size, ctx);
	if (j.contains("subspace_dim") && !j.at("subspace_dim").is_null())
		c.subspace_dim = count_at(j.at("subspace_dim"), ctx + ".subspace_dim");
	c.seed = count_or(j, "seed", c.seed, ctx);
	c.jobs = static_cast<int>(count_or(j, "jobs", c.jobs, ctx));
	return c;
}

VolumeParams volume_from_json(const Json& j, const std::string& ctx)
{
	allow_keys(j, {"eps", "r", "boxes", "samples_per_box", "seed"}, ctx);
	VolumeParams v;
	v.eps = number_or(j, "eps", v.eps, ctx);
	v.r = number_or(j, "r", v.r, ctx);
	v.boxes = count_or(j, "boxes", v.boxes, ctx);
	v.samples_per_box = count_or(j, "samples_per_box", v.samples_per_box, ctx);
	v.seed = count_or(j, "seed", v.seed, ctx);
	return v;
}

TrainConfig train_from_json(const Json& j, const std::string& ctx)
{
	allow_keys(j, {"learning_rate", "epochs", "seed", "stop_grad_norm", "init_scale"}, ctx);
	TrainConfig t;
	t.learning_rate = number_or(j, "learning_rate", t.learning_rate, ctx);
	t.epochs = static_cast<int>(count_or(j, "epochs", t.epochs, ctx));
	t.seed = count_or(j, "seed", t.seed, ctx);
	t.stop_grad_norm = number_or(j, "stop_grad_norm", t.stop_grad_norm, ctx);
	t.init_scale = number_or(j, "init_scale", t.init_scale, ctx);
	return t;
}

} // namespace

std::string dump_json(const Json& j, int indent)
{
	std::string out;
	dump_into(out, j, indent, 0);
	out += "\n";
	return out;
}

Json parse_json(const std::string& text, const std::string& what)
{
	try {
		return Json::parse(text);
	} catch (const Json::parse_error& e) {
		throw InvalidInput(what + ": malformed JSON (" + e.what() + ")");
	}
}

std::string read_file(const fs::path& path)
{
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw InvalidInput("cannot read file '" + path.string() + "'");
	std::ostringstream ss;
	ss << in.rdbuf();
	return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& content)
{
	const fs::path tmp = path.string() + ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out)
			throw InvalidInput("cannot write file '" + path.string() + "'");
		out << content;
		out.flush();
		if (!out)
			throw InvalidInput("failed writing file '" + path.string() + "'");
	}
	std::error_code ec;
	fs::rename(tmp, path, ec);
	if (ec) {
		fs::remove(tmp, ec);
		throw InvalidInput("cannot replace file '" + path.string() + "'");
	}
}

// ---------------------------------------------------------------------------
// checkpoints

Json checkpoint_to_json(const Architecture& arch, const ParamVector& theta)
{
	validate_params(arch, theta);
	Json j;
	j["layer_widths"] = arch.layer_widths;
	j["use_bias"] = arch.use_bias;
	Json weights = Json::array();
	for (const auto& w : theta.weights)
		weights.push_back(number_array(w.data()));
	j["weights"] = weights;
	if (theta.biases) {
		Json biases = Json::array();
		for (const auto& b : *theta.biases)
			biases.push_back(number_array(b));
		j["biases"] = biases;
	} else {
		j["biases"] = nullptr;
	}
	return j;
}

Checkpoint checkpoint_from_json(const Json& j)
{
	const std::string ctx = "checkpoint";
	allow_keys(j, {"layer_widths", "use_bias", "weights", "biases"}, ctx);
	const Json& ub = require(j, "use_bias", ctx);
	if (!ub.is_boolean())
		throw InvalidInput(ctx + ".use_bias: expected true or false");
	Checkpoint c;
	c.arch = architecture_from_json(require(j, "layer_widths", ctx), ub.get<bool>(), ctx + ".layer_widths");
	const std::size_t K = c.arch.depth();

	const Json& weights = require(j, "weights", ctx);
	if (!weights.is_array() || weights.size() != K)
		throw InvalidInput(ctx + ".weights: expected " + std::to_string(K) + " layers");
	for (std::size_t k = 0; k < K; ++k) {
		const std::string lctx = ctx + ".weights[" + std::to_string(k) + "]";
		Vector entries = number_list(weights[k], lctx);
		const std::size_t rows = c.arch.layer_widths[k], cols = c.arch.layer_widths[k + 1];
		if (entries.size() != rows * cols)
			throw InvalidInput(lctx + ": expected " + std::to_string(rows * cols) + " entries");
		c.theta.weights.emplace_back(rows, cols, std::move(entries));
	}

	const Json& biases = require(j, "biases", ctx);
	if (c.arch.use_bias) {
		if (!biases.is_array() || biases.size() != K)
			throw InvalidInput(ctx + ".biases: expected " + std::to_string(K) + " layers");
		std::vector<Vector> bs;
		for (std::size_t k = 0; k < K; ++k)
			bs.push_back(number_list(biases[k], ctx + ".biases[" + std::to_string(k) + "]"));
		c.theta.biases = std::move(bs);
	} else if (!biases.is_null()) {
		throw InvalidInput(ctx + ".biases: must be null when use_bias is false");
	}
	validate_params(c.arch, c.theta);
	return c;
}

void save_checkpoint(const fs::path& path, const Architecture& arch, const ParamVector& theta)
{
	write_file_atomic(path, dump_json(checkpoint_to_json(arch, theta)));
}

Checkpoint load_checkpoint(const fs::path& path)
{
	try {
		return checkpoint_from_json(parse_json(read_file(path), path.string()));
	} catch (const InvalidInput& e) {
		const std::string msg = e.what();
		if (msg.find(path.string()) != std::string::npos)
			throw;
		throw InvalidInput(path.string() + ": " + msg);
	}
}

// ---------------------------------------------------------------------------
// transforms and data

Json transform_to_json(const TransformSpec& spec)
{
	Json j;
	j["kind"] = transform_kind(spec);
	std::visit(overloaded{
	               [&](const AlphaScaleTwoLayer& s) { j["alpha"] = s.alpha; },
	               [&](const AlphaScaleDeep& s) { j["alphas"] = number_array(s.alphas); },
	               [&](const WeightNormScale& s) {
		               j["layer"] = s.layer;
		               j["alpha"] = s.alpha;
	               },
	               [&](const Radial& s) {
		               j["center"] = number_array(s.center);
		               j["delta"] = s.delta;
		               j["rho"] = s.rho;
		               j["r_hat"] = s.r_hat;
	               },
	               [&](const PowerStretch& s) {
		               j["center"] = s.center;
		               j["a"] = s.a;
		               j["b"] = s.b;
	               },
	               [&](const InputAffine& s) {
		               Json rows = Json::array();
		               for (std::size_t i = 0; i < s.matrix.rows(); ++i)
			               rows.push_back(number_array(s.matrix.data().subspan(i * s.matrix.cols(), s.matrix.cols())));
		               j["matrix"] = rows;
		               j["shift"] = number_array(s.shift);
	               },
	           },
	           spec);
	return j;
}

TransformSpec transform_from_json(const Json& j)
{
	const std::string ctx = "transform spec";
	if (!j.is_object())
		throw InvalidInput(ctx + ": expected a JSON object");
	const std::string kind = string_at(j, "kind", ctx);
	const std::string kctx = ctx + " (" + kind + ")";
	TransformSpec spec;
	if (kind == "alpha_scale_two_layer") {
		allow_keys(j, {"kind", "alpha"}, kctx);
		spec = AlphaScaleTwoLayer{number_at(j, "alpha", kctx)};
	} else if (kind == "alpha_scale_deep") {
		allow_keys(j, {"kind", "alphas"}, kctx);
		spec = AlphaScaleDeep{number_list(require(j, "alphas", kctx), kctx + ".alphas")};
	} else if (kind == "weight_norm") {
		allow_keys(j, {"kind", "layer", "alpha"}, kctx);
		spec = WeightNormScale{count_at(require(j, "layer", kctx), kctx + ".layer"), number_at(j, "alpha", kctx)};
	} else if (kind == "radial") {
		allow_keys(j, {"kind", "center", "delta", "rho", "r_hat"}, kctx);
		spec = Radial{number_list(require(j, "center", kctx), kctx + ".center"), number_at(j, "delta", kctx),
		              number_at(j, "rho", kctx), number_at(j, "r_hat", kctx)};
	} else if (kind == "power_stretch") {
		allow_keys(j, {"kind", "center", "a", "b"}, kctx);
		spec = PowerStretch{number_at(j, "center", kctx), number_at(j, "a", kctx), number_at(j, "b", kctx)};
	} else if (kind == "input_affine") {
		allow_keys(j, {"kind", "matrix", "shift"}, kctx);
		const Json& rows = require(j, "matrix", kctx);
		if (!rows.is_array() || rows.empty())
			throw InvalidInput(kctx + ".matrix: expected a non-empty array of rows");
		const std::size_t n = rows.size();
		Vector entries;
		for (const auto& r : rows) {
			Vector row = number_list(r, kctx + ".matrix");
			if (row.size() != n)
				throw InvalidInput(kctx + ".matrix: must be square");
			entries.insert(entries.end(), row.begin(), row.end());
		}
		spec = InputAffine{DenseMatrix(n, n, std::move(entries)), number_list(require(j, "shift", kctx), kctx + ".shift")};
	} else {
		throw InvalidInput(ctx + ": unknown kind '" + kind + "'");
	}
	validate_transform(spec);
	return spec;
}

Json dataset_to_json(const Dataset& data)
{
	Json inputs = Json::array();
	for (const auto& x : data.inputs)
		inputs.push_back(number_array(x));
	return Json{{"inputs", inputs}, {"targets", number_array(data.targets)}};
}

Dataset dataset_from_json(const Json& j)
{
	const std::string ctx = "dataset";
	allow_keys(j, {"inputs", "targets"}, ctx);
	Dataset d;
	const Json& inputs = require(j, "inputs", ctx);
	if (!inputs.is_array())
		throw InvalidInput(ctx + ".inputs: expected an array of input vectors");
	for (const auto& x : inputs)
		d.inputs.push_back(number_list(x, ctx + ".inputs"));
	d.targets = number_list(require(j, "targets", ctx), ctx + ".targets");
	if (d.inputs.size() != d.targets.size())
		throw InvalidInput(ctx + ": inputs and targets differ in length");
	return d;
}

// ---------------------------------------------------------------------------
// reports

Json flatness_report_to_json(const FlatnessReport& r)
{
	auto num = [](double v) { return Json(v); };
	Json j;
	j["loss"] = r.loss;
	j["grad_norm"] = r.gradient_norm;
	j["kink_dist"] = r.kink_distance;
	j["spec_norm"] = measured_json(r.hessian_spectral_norm, num);
	j["trace"] = measured_json(r.hessian_trace, num);
	j["eigenvalues"] = measured_json(r.eigenvalues, [](const Vector& v) { return number_array(v); });
	j["thresholds"] = number_array(r.thresholds);
	j["eigencount_above"] = measured_json(r.eigencount_above, [](const std::vector<std::size_t>& v) { return Json(v); });
	j["eps_sharp"] = r.epsilon_sharpness;
	j["eps_sharp_is_lower_bound"] = true;
	j["eps_sharp_offset"] = number_array(r.epsilon_sharpness_offset);
	j["sharp_2nd"] = measured_json(r.second_order_sharpness, num);
	j["volume_certificate"] = measured_json(r.volume_certificate, volume_json);
	return j;
}

Json scenario_report_to_json(const ScenarioReport& r)
{
	Json j;
	j["name"] = r.name;
	j["passed"] = r.passed;
	j["transform"] = r.transform_kind;
	j["alphas"] = number_array(r.alphas);
	j["flags"] = r.flags;
	j["equivalence"] = Json{{"applicable", r.equivalence.applicable},
	                        {"probes", r.equivalence.probes},
	                        {"max_deviation", r.equivalence.max_deviation},
	                        {"passed", r.equivalence.passed}};
	Json verdicts = Json::array();
	for (const auto& v : r.verdicts)
		verdicts.push_back(Json{{"name", v.name},
		                        {"passed", v.passed},
		                        {"measured", v.measured},
		                        {"threshold", v.threshold},
		                        {"detail", v.detail}});
	j["checks"] = verdicts;
	j["before"] = flatness_report_to_json(r.before);
	j["after"] = flatness_report_to_json(r.after);
	return j;
}

Json suite_result_to_json(const SuiteResult& r)
{
	Json checks = Json::array();
	for (const auto& c : r.checks)
		checks.push_back(Json{{"name", c.name},
		                      {"passed", c.passed},
		                      {"measured", c.measured},
		                      {"threshold", c.threshold},
		                      {"trials", c.trials},
		                      {"detail", c.detail}});
	return Json{{"suite", r.suite}, {"seed", r.seed}, {"passed", r.passed()}, {"checks", checks}};
}

Json reparam_demo_to_json(const ReparamDemo& d)
{
	Json minima = Json::array();
	for (const auto& m : d.minima)
		minima.push_back(Json{{"theta", m.theta},
		                      {"eta", m.eta},
		                      {"measured", m.measured},
		                      {"predicted", m.predicted},
		                      {"rel_error", m.rel_error}});
	Json full = Json::array();
	for (const auto& f : d.noncritical)
		full.push_back(
		    Json{{"eta", f.eta}, {"measured", f.measured}, {"predicted", f.predicted}, {"rel_error", f.rel_error}});
	return Json{{"passed", d.passed},
	            {"max_minimum_error", d.max_minimum_error},
	            {"max_full_error", d.max_full_error},
	            {"minima", minima},
	            {"noncritical", full},
	            {"notes", d.notes}};
}

ScenarioSpec scenario_spec_from_json(const Json& j, const fs::path& base_dir)
{
	const std::string ctx = "scenario";
	allow_keys(j,
	           {"name", "arch", "bias", "data", "checkpoint", "train", "transform", "metrics", "thresholds", "volume",
	            "checks"},
	           ctx);
	ScenarioSpec s;
	if (j.contains("name"))
		s.name = string_at(j, "name", ctx);
	s.arch = architecture_from_json(require(j, "arch", ctx), bool_or(j, "bias", false, ctx), ctx + ".arch");
	auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };

	if (j.contains("data")) {
		const Json& d = j.at("data");
		const std::string dctx = ctx + ".data";
		const std::string source = string_at(d, "source", dctx);
		if (source == "teacher") {
			allow_keys(d, {"source", "seed", "m", "input_scale"}, dctx);
			s.data_seed = count_or(d, "seed", 0, dctx);
			s.m = count_or(d, "m", s.m, dctx);
			s.input_scale = number_or(d, "input_scale", s.input_scale, dctx);
		} else if (source == "file") {
			allow_keys(d, {"source", "path"}, dctx);
			const fs::path p = resolve(string_at(d, "path", dctx));
			s.dataset = dataset_from_json(parse_json(read_file(p), p.string()));
		} else {
			throw InvalidInput(dctx + ".source: expected 'teacher' or 'file'");
		}
	}
	if (j.contains("checkpoint")) {
		const Checkpoint c = load_checkpoint(resolve(string_at(j, "checkpoint", ctx)));
		if (!(c.arch == s.arch))
			throw InvalidInput(ctx + ".checkpoint: architecture differs from scenario arch");
		s.checkpoint = c.theta;
	}
	if (j.contains("train"))
		s.train = train_from_json(j.at("train"), ctx + ".train");

	if (j.contains("transform")) {
		const Json& t = j.at("transform");
		const std::string tctx = ctx + ".transform";
		if (t.is_object() && t.contains("kind")) {
			s.transform = FixedTransform{transform_from_json(t)};
		} else {
			const std::string rule = string_at(t, "rule", tctx);
			if (rule == "fixed") {
				allow_keys(t, {"rule", "spec"}, tctx);
				s.transform = FixedTransform{transform_from_json(require(t, "spec", tctx))};
			} else if (rule == "sharpen") {
				allow_keys(t, {"rule", "M"}, tctx);
				s.transform = SharpenTransform{number_at(t, "M", tctx)};
			} else if (rule == "eps_sharp") {
				allow_keys(t, {"rule", "eps"}, tctx);
				s.transform = EpsSharpTransform{number_at(t, "eps", tctx)};
			} else if (rule == "many_directions") {
				allow_keys(t, {"rule", "M"}, tctx);
				s.transform = ManyDirectionsTransform{number_at(t, "M", tctx)};
			} else {
				throw InvalidInput(tctx + ".rule: unknown rule '" + rule + "'");
			}
		}
	}
	if (j.contains("metrics"))
		s.metrics = sharpness_from_json(j.at("metrics"), ctx + ".metrics");
	if (j.contains("thresholds"))
		s.thresholds = number_list(j.at("thresholds"), ctx + ".thresholds");
	if (j.contains("volume"))
		s.volume = volume_from_json(j.at("volume"), ctx + ".volume");
	if (j.contains("checks")) {
		const Json& cs = j.at("checks");
		if (!cs.is_array())
			throw InvalidInput(ctx + ".checks: expected an array");
		for (const auto& c : cs) {
			CheckSpec cs_;
			if (c.is_string()) {
				cs_.name = c.get<std::string>();
			} else {
				allow_keys(c, {"name", "tolerance"}, ctx + ".checks");
				cs_.name = string_at(c, "name", ctx + ".checks");
				if (c.contains("tolerance"))
					cs_.tolerance = as_number(c.at("tolerance"), ctx + ".checks." + cs_.name);
			}
			s.checks.push_back(std::move(cs_));
		}
	}
	s.validate();
	return s;
}

DemoSpec demo_spec_from_json(const Json& j)
{
	const std::string ctx = "demo spec";
	allow_keys(j, {"loss", "reparam", "theta_lo", "theta_hi", "grid_points"}, ctx);
	DemoSpec d;
	d.loss = string_at(j, "loss", ctx);
	demo_loss(d.loss);
	const TransformSpec t = transform_from_json(require(j, "reparam", ctx));
	if (auto* p = std::get_if<PowerStretch>(&t))
		d.reparam = *p;
	else if (auto* r = std::get_if<Radial>(&t))
		d.reparam = *r;
	else
		throw InvalidInput(ctx + ".reparam: must be power_stretch or radial");
	d.theta_lo = number_or(j, "theta_lo", d.theta_lo, ctx);
	d.theta_hi = number_or(j, "theta_hi", d.theta_hi, ctx);
	d.grid_points = count_or(j, "grid_points", d.grid_points, ctx);
	return d;
}

} // namespace flatlab
