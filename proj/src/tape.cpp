#include "unierase/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>

namespace unierase {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

static ECMap emap(const Matrix& m) { return ECMap(m.data(), m.rows(), m.cols()); }
static EMap emap(Matrix& m) { return EMap(m.data(), m.rows(), m.cols()); }

static constexpr double kMaskValue = -1e30;  // finite stand-in for -inf
static constexpr double kLnEps = 1e-5;

namespace {
std::atomic<uint32_t> g_tape_counter{1};

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_bwd(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}
double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
double logsigmoid_fwd(double x) {
    // log σ(x) = −log(1+e^{−x}) = x − log(1+e^{x}); pick the stable branch.
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}
}  // namespace

struct GradTape::Node {
    enum Kind {
        kConst, kParam, kMatmul, kMatmulNT, kAdd, kSub, kScale, kAddConst,
        kHadamard, kSumOf, kGelu, kLog, kLogSigmoid, kSoftmaxRows, kLayerNorm,
        kGatherRows, kAddToRow, kSumAll, kMeanAll, kAttention, kCrossEntropy,
        kKlToRef
    };
    Kind kind = kConst;
    int a = -1, b = -1;
    std::vector<int> more;  // sum_of inputs
    Matrix val;
    bool needs = false;
    ParamId pid = -1;
    double scalar = 0.0;
    int irow = -1;
    int heads = 0;
    std::vector<int> ids, targets;
    Matrix aux, aux2;
    std::vector<Matrix> probs;
    RowSpans spans;
};

struct GradTape::Store {
    std::vector<Node> nodes;
};

GradTape::GradTape() : store_(new Store), tape_id_(g_tape_counter.fetch_add(1)) {}

GradTape::~GradTape() = default;

size_t GradTape::node_count() const { return store_->nodes.size(); }

int GradTape::push(Node n) {
    store_->nodes.push_back(std::move(n));
    return static_cast<int>(store_->nodes.size()) - 1;
}

void GradTape::check_own(Var v, const char* op) const {
    if (!v.valid() || v.tape != tape_id_ ||
        v.node >= static_cast<int>(store_->nodes.size()))
        throw UsageError(std::string(op) + ": handle not on this tape");
}

const GradTape::Node& GradTape::at(Var v) const { return store_->nodes[v.node]; }

const Matrix& GradTape::value(Var v) const {
    check_own(v, "value");
    return at(v).val;
}

double GradTape::scalar_value(Var v) const {
    const Matrix& m = value(v);
    if (m.rows() != 1 || m.cols() != 1)
        throw UsageError("scalar_value: var is not 1x1");
    return m(0, 0);
}

void GradTape::clear() { store_->nodes.clear(); }

Var GradTape::constant(Matrix m) {
    Node n;
    n.kind = Node::kConst;
    n.val = std::move(m);
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::param(const Matrix& m, ParamId pid) {
    Node n;
    n.kind = Node::kParam;
    n.val = m;
    n.needs = true;
    n.pid = pid;
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::matmul(Var a, Var b) {
    check_own(a, "matmul"); check_own(b, "matmul");
    const Matrix& A = at(a).val; const Matrix& B = at(b).val;
    if (A.cols() != B.rows()) throw InputError("tape matmul: inner dims disagree");
    Node n;
    n.kind = Node::kMatmul; n.a = a.node; n.b = b.node;
    n.needs = at(a).needs || at(b).needs;
    n.val = Matrix(A.rows(), B.cols());
    emap(n.val).noalias() = emap(A) * emap(B);
    n.val.check_finite("tape matmul");
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::matmul_nt(Var a, Var b) {
    check_own(a, "matmul_nt"); check_own(b, "matmul_nt");
    const Matrix& A = at(a).val; const Matrix& B = at(b).val;
    if (A.cols() != B.cols()) throw InputError("tape matmul_nt: inner dims disagree");
    Node n;
    n.kind = Node::kMatmulNT; n.a = a.node; n.b = b.node;
    n.needs = at(a).needs || at(b).needs;
    n.val = Matrix(A.rows(), B.rows());
    emap(n.val).noalias() = emap(A) * emap(B).transpose();
    n.val.check_finite("tape matmul_nt");
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::add(Var a, Var b) {
    check_own(a, "add"); check_own(b, "add");
    if (!at(a).val.same_shape(at(b).val)) throw InputError("tape add: shape mismatch");
    Node n;
    n.kind = Node::kAdd; n.a = a.node; n.b = b.node;
    n.needs = at(a).needs || at(b).needs;
    n.val = at(a).val;
    emap(n.val) += emap(at(b).val);
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::sub(Var a, Var b) {
    check_own(a, "sub"); check_own(b, "sub");
    if (!at(a).val.same_shape(at(b).val)) throw InputError("tape sub: shape mismatch");
    Node n;
    n.kind = Node::kSub; n.a = a.node; n.b = b.node;
    n.needs = at(a).needs || at(b).needs;
    n.val = at(a).val;
    emap(n.val) -= emap(at(b).val);
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::scale(Var a, double s) {
    check_own(a, "scale");
    Node n;
    n.kind = Node::kScale; n.a = a.node; n.scalar = s;
    n.needs = at(a).needs;
    n.val = at(a).val;
    emap(n.val) *= s;
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::add_const(Var a, double c) {
    check_own(a, "add_const");
    Node n;
    n.kind = Node::kAddConst; n.a = a.node; n.scalar = c;
    n.needs = at(a).needs;
    n.val = at(a).val;
    emap(n.val).array() += c;
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::hadamard(Var a, Var b) {
    check_own(a, "hadamard"); check_own(b, "hadamard");
    if (!at(a).val.same_shape(at(b).val)) throw InputError("tape hadamard: shape mismatch");
    Node n;
    n.kind = Node::kHadamard; n.a = a.node; n.b = b.node;
    n.needs = at(a).needs || at(b).needs;
    n.val = at(a).val;
    emap(n.val).array() *= emap(at(b).val).array();
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::sum_of(const std::vector<Var>& vs) {
    if (vs.empty()) throw InputError("sum_of: no inputs");
    Node n;
    n.kind = Node::kSumOf;
    n.val = value(vs[0]);
    for (size_t i = 1; i < vs.size(); ++i) {
        check_own(vs[i], "sum_of");
        if (!at(vs[i]).val.same_shape(n.val))
            throw InputError("sum_of: shape mismatch");
        emap(n.val) += emap(at(vs[i]).val);
    }
    for (const Var& v : vs) {
        n.more.push_back(v.node);
        n.needs = n.needs || at(v).needs;
    }
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::gelu(Var a) {
    check_own(a, "gelu");
    Node n;
    n.kind = Node::kGelu; n.a = a.node; n.needs = at(a).needs;
    n.val = at(a).val;
    for (int r = 0; r < n.val.rows(); ++r)
        for (int c = 0; c < n.val.cols(); ++c) n.val(r, c) = gelu_fwd(n.val(r, c));
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::log(Var a) {
    check_own(a, "log");
    Node n;
    n.kind = Node::kLog; n.a = a.node; n.needs = at(a).needs;
    n.val = at(a).val;
    for (int r = 0; r < n.val.rows(); ++r)
        for (int c = 0; c < n.val.cols(); ++c) {
            if (n.val(r, c) <= 0) throw InputError("tape log: nonpositive input");
            n.val(r, c) = std::log(n.val(r, c));
        }
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::logsigmoid(Var a) {
    check_own(a, "logsigmoid");
    Node n;
    n.kind = Node::kLogSigmoid; n.a = a.node; n.needs = at(a).needs;
    n.val = at(a).val;
    for (int r = 0; r < n.val.rows(); ++r)
        for (int c = 0; c < n.val.cols(); ++c) n.val(r, c) = logsigmoid_fwd(n.val(r, c));
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::softmax_rows(Var z) {
    check_own(z, "softmax_rows");
    Node n;
    n.kind = Node::kSoftmaxRows; n.a = z.node; n.needs = at(z).needs;
    n.val = at(z).val;
    for (int r = 0; r < n.val.rows(); ++r) {
        double m = n.val(r, 0);
        for (int c = 1; c < n.val.cols(); ++c) m = std::max(m, n.val(r, c));
        double s = 0;
        for (int c = 0; c < n.val.cols(); ++c) {
            n.val(r, c) = std::exp(n.val(r, c) - m);
            s += n.val(r, c);
        }
        for (int c = 0; c < n.val.cols(); ++c) n.val(r, c) /= s;
    }
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::layernorm(Var x, Var gain) {
    check_own(x, "layernorm"); check_own(gain, "layernorm");
    const Matrix& X = at(x).val; const Matrix& G = at(gain).val;
    if (G.rows() != 1 || G.cols() != X.cols())
        throw InputError("layernorm: gain must be 1 x cols");
    const int R = X.rows(), C = X.cols();
    Node n;
    n.kind = Node::kLayerNorm; n.a = x.node; n.b = gain.node;
    n.needs = at(x).needs || at(gain).needs;
    n.val = Matrix(R, C);
    n.aux = Matrix(R, C);   // normalized x̂
    n.aux2 = Matrix(R, 1);  // 1/std per row
    for (int r = 0; r < R; ++r) {
        double mu = 0;
        for (int c = 0; c < C; ++c) mu += X(r, c);
        mu /= C;
        double var = 0;
        for (int c = 0; c < C; ++c) { double d = X(r, c) - mu; var += d * d; }
        var /= C;
        double inv = 1.0 / std::sqrt(var + kLnEps);
        n.aux2(r, 0) = inv;
        for (int c = 0; c < C; ++c) {
            double xh = (X(r, c) - mu) * inv;
            n.aux(r, c) = xh;
            n.val(r, c) = xh * G(0, c);
        }
    }
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::gather_rows(Var table, std::vector<int> ids) {
    check_own(table, "gather_rows");
    const Matrix& T = at(table).val;
    Node n;
    n.kind = Node::kGatherRows; n.a = table.node; n.needs = at(table).needs;
    n.val = Matrix(static_cast<int>(ids.size()), T.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= T.rows())
            throw InputError("gather_rows: id out of range");
        for (int c = 0; c < T.cols(); ++c) n.val(static_cast<int>(i), c) = T(ids[i], c);
    }
    n.ids = std::move(ids);
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::add_to_row(Var base, int row, Var vec) {
    check_own(base, "add_to_row"); check_own(vec, "add_to_row");
    const Matrix& B = at(base).val; const Matrix& V = at(vec).val;
    if (row < 0 || row >= B.rows()) throw InputError("add_to_row: row out of range");
    if (V.rows() != 1 || V.cols() != B.cols())
        throw InputError("add_to_row: vec must be 1 x cols");
    Node n;
    n.kind = Node::kAddToRow; n.a = base.node; n.b = vec.node; n.irow = row;
    n.needs = at(base).needs || at(vec).needs;
    n.val = B;
    for (int c = 0; c < B.cols(); ++c) n.val(row, c) += V(0, c);
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::sum_all(Var a) {
    check_own(a, "sum_all");
    Node n;
    n.kind = Node::kSumAll; n.a = a.node; n.needs = at(a).needs;
    n.val = Matrix(1, 1);
    n.val(0, 0) = emap(at(a).val).sum();
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::mean_all(Var a) {
    check_own(a, "mean_all");
    const Matrix& A = at(a).val;
    if (A.empty()) throw InputError("mean_all: empty input");
    Node n;
    n.kind = Node::kMeanAll; n.a = a.node; n.needs = at(a).needs;
    n.scalar = 1.0 / static_cast<double>(A.size());
    n.val = Matrix(1, 1);
    n.val(0, 0) = emap(A).sum() * n.scalar;
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::causal_attention(Var q, Var k, Var v, int heads, RowSpans spans) {
    check_own(q, "causal_attention"); check_own(k, "causal_attention");
    check_own(v, "causal_attention");
    const Matrix& Q = at(q).val; const Matrix& K = at(k).val; const Matrix& V = at(v).val;
    if (!Q.same_shape(K) || !Q.same_shape(V))
        throw InputError("causal_attention: q/k/v shapes disagree");
    if (heads < 1 || Q.cols() % heads != 0)
        throw InputError("causal_attention: head count must divide dim");
    const int hd = Q.cols() / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Node n;
    n.kind = Node::kAttention;
    n.a = q.node; n.b = k.node; n.irow = v.node;  // irow reused as third input
    n.needs = at(q).needs || at(k).needs || at(v).needs;
    n.heads = heads;
    n.spans = spans;
    n.val = Matrix(Q.rows(), Q.cols());
    n.probs.reserve(spans.size() * heads);

    ECMap qm = emap(Q);
    ECMap km = emap(K);
    ECMap vm = emap(V);
    EMap om = emap(n.val);
    for (const auto& [b, len] : spans) {
        if (b < 0 || len < 1 || b + len > Q.rows())
            throw InputError("causal_attention: span out of range");
        for (int h = 0; h < heads; ++h) {
            auto Qb = qm.block(b, h * hd, len, hd);
            auto Kb = km.block(b, h * hd, len, hd);
            auto Vb = vm.block(b, h * hd, len, hd);

            Matrix P(len, len);
            EMap pm = emap(P);
            pm.noalias() = Qb * Kb.transpose() * att_scale;
            for (int i = 0; i < len; ++i)
                for (int j = i + 1; j < len; ++j) pm(i, j) = kMaskValue;
            for (int i = 0; i < len; ++i) {
                double mx = pm.row(i).maxCoeff();
                pm.row(i) = (pm.row(i).array() - mx).exp();
                pm.row(i) /= pm.row(i).sum();
            }
            om.block(b, h * hd, len, hd).noalias() = pm * Vb;
            n.probs.push_back(std::move(P));
        }
    }
    n.val.check_finite("causal_attention");
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::cross_entropy_sum(Var logits, std::vector<int> positions,
                                std::vector<int> targets) {
    check_own(logits, "cross_entropy_sum");
    if (positions.size() != targets.size())
        throw InputError("cross_entropy_sum: positions/targets length mismatch");
    const Matrix& L = at(logits).val;
    const int V = L.cols();
    Node n;
    n.kind = Node::kCrossEntropy; n.a = logits.node; n.needs = at(logits).needs;
    n.aux = Matrix(static_cast<int>(positions.size()), V);  // softmax rows
    double total = 0;
    for (size_t i = 0; i < positions.size(); ++i) {
        int r = positions[i], t = targets[i];
        if (r < 0 || r >= L.rows()) throw InputError("cross_entropy_sum: position out of range");
        if (t < 0 || t >= V) throw InputError("cross_entropy_sum: target out of range");
        double mx = L(r, 0);
        for (int c = 1; c < V; ++c) mx = std::max(mx, L(r, c));
        double s = 0;
        for (int c = 0; c < V; ++c) s += std::exp(L(r, c) - mx);
        double lse = mx + std::log(s);
        total += lse - L(r, t);
        for (int c = 0; c < V; ++c)
            n.aux(static_cast<int>(i), c) = std::exp(L(r, c) - lse);
    }
    n.ids = std::move(positions);
    n.targets = std::move(targets);
    n.val = Matrix(1, 1);
    n.val(0, 0) = total;
    n.val.check_finite("cross_entropy_sum");
    return Var{push(std::move(n)), tape_id_};
}

Var GradTape::kl_to_ref_rows(Var logits, std::vector<int> positions,
                             Matrix ref_logprob) {
    check_own(logits, "kl_to_ref_rows");
    const Matrix& L = at(logits).val;
    const int V = L.cols();
    if (ref_logprob.rows() != static_cast<int>(positions.size()) ||
        ref_logprob.cols() != V)
        throw InputError("kl_to_ref_rows: ref shape mismatch");
    Node n;
    n.kind = Node::kKlToRef; n.a = logits.node; n.needs = at(logits).needs;
    n.aux = Matrix(static_cast<int>(positions.size()), V);   // model probs p
    n.aux2 = Matrix(static_cast<int>(positions.size()), V);  // log p − log ref
    double total = 0;
    for (size_t i = 0; i < positions.size(); ++i) {
        int r = positions[i];
        if (r < 0 || r >= L.rows()) throw InputError("kl_to_ref_rows: position out of range");
        double mx = L(r, 0);
        for (int c = 1; c < V; ++c) mx = std::max(mx, L(r, c));
        double s = 0;
        for (int c = 0; c < V; ++c) s += std::exp(L(r, c) - mx);
        double lse = mx + std::log(s);
        double kl = 0;
        for (int c = 0; c < V; ++c) {
            double lp = L(r, c) - lse;
            double p = std::exp(lp);
            double diff = lp - ref_logprob(static_cast<int>(i), c);
            n.aux(static_cast<int>(i), c) = p;
            n.aux2(static_cast<int>(i), c) = diff;
            kl += p * diff;
        }
        total += kl;
    }
    n.ids = std::move(positions);
    n.val = Matrix(1, 1);
    n.val(0, 0) = total;
    n.val.check_finite("kl_to_ref_rows");
    return Var{push(std::move(n)), tape_id_};
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

std::unordered_map<ParamId, Matrix> GradTape::grad(Var loss) {
    check_own(loss, "grad");
    const Node& ln = at(loss);
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
        throw UsageError("grad: loss must be 1x1");

    std::unordered_map<ParamId, Matrix> out;
    for (const Node& n : store_->nodes)
        if (n.kind == Node::kParam && !out.count(n.pid))
            out.emplace(n.pid, Matrix(n.val.rows(), n.val.cols()));

    std::vector<Matrix> adj(store_->nodes.size());
    auto accum = [&](int idx, auto&& expr) {
        if (idx < 0 || !store_->nodes[idx].needs) return;
        Matrix& a = adj[idx];
        if (a.empty()) {
            a = Matrix(store_->nodes[idx].val.rows(), store_->nodes[idx].val.cols());
            emap(a) = expr;
        } else {
            emap(a) += expr;
        }
    };

    if (ln.needs) {
        adj[loss.node] = Matrix(1, 1);
        adj[loss.node](0, 0) = 1.0;
    }

    for (int idx = loss.node; idx >= 0; --idx) {
        Node& n = store_->nodes[idx];
        if (adj[idx].empty() || !n.needs) continue;
        const Matrix& g = adj[idx];
        switch (n.kind) {
            case Node::kConst:
                break;
            case Node::kParam:
                emap(out.at(n.pid)) += emap(g);
                break;
            case Node::kMatmul:
                accum(n.a, emap(g) * emap(store_->nodes[n.b].val).transpose());
                accum(n.b, emap(store_->nodes[n.a].val).transpose() * emap(g));
                break;
            case Node::kMatmulNT:
                accum(n.a, emap(g) * emap(store_->nodes[n.b].val));
                accum(n.b, emap(g).transpose() * emap(store_->nodes[n.a].val));
                break;
            case Node::kAdd:
                accum(n.a, emap(g));
                accum(n.b, emap(g));
                break;
            case Node::kSub:
                accum(n.a, emap(g));
                accum(n.b, -emap(g));
                break;
            case Node::kScale:
                accum(n.a, emap(g) * n.scalar);
                break;
            case Node::kAddConst:
                accum(n.a, emap(g));
                break;
            case Node::kHadamard:
                accum(n.a, emap(g).cwiseProduct(emap(store_->nodes[n.b].val)));
                accum(n.b, emap(g).cwiseProduct(emap(store_->nodes[n.a].val)));
                break;
            case Node::kSumOf:
                for (int in : n.more) accum(in, emap(g));
                break;
            case Node::kGelu: {
                Matrix d = store_->nodes[n.a].val;
                for (int r = 0; r < d.rows(); ++r)
                    for (int c = 0; c < d.cols(); ++c)
                        d(r, c) = gelu_bwd(d(r, c)) * g(r, c);
                accum(n.a, emap(d));
                break;
            }
            case Node::kLog: {
                Matrix d = store_->nodes[n.a].val;
                for (int r = 0; r < d.rows(); ++r)
                    for (int c = 0; c < d.cols(); ++c) d(r, c) = g(r, c) / d(r, c);
                accum(n.a, emap(d));
                break;
            }
            case Node::kLogSigmoid: {
                Matrix d = store_->nodes[n.a].val;
                for (int r = 0; r < d.rows(); ++r)
                    for (int c = 0; c < d.cols(); ++c)
                        d(r, c) = sigmoid(-d(r, c)) * g(r, c);
                accum(n.a, emap(d));
                break;
            }
            case Node::kSoftmaxRows: {
                const Matrix& p = n.val;
                Matrix d(p.rows(), p.cols());
                for (int r = 0; r < p.rows(); ++r) {
                    double dot = 0;
                    for (int c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
                    for (int c = 0; c < p.cols(); ++c)
                        d(r, c) = p(r, c) * (g(r, c) - dot);
                }
                accum(n.a, emap(d));
                break;
            }
            case Node::kLayerNorm: {
                const Matrix& xh = n.aux;
                const Matrix& inv = n.aux2;
                const Matrix& G = store_->nodes[n.b].val;
                const int R = xh.rows(), C = xh.cols();
                if (store_->nodes[n.b].needs) {
                    Matrix dg(1, C);
                    for (int c = 0; c < C; ++c) {
                        double s = 0;
                        for (int r = 0; r < R; ++r) s += g(r, c) * xh(r, c);
                        dg(0, c) = s;
                    }
                    accum(n.b, emap(dg));
                }
                if (store_->nodes[n.a].needs) {
                    Matrix dx(R, C);
                    for (int r = 0; r < R; ++r) {
                        double m1 = 0, m2 = 0;
                        for (int c = 0; c < C; ++c) {
                            double dxh = g(r, c) * G(0, c);
                            m1 += dxh;
                            m2 += dxh * xh(r, c);
                        }
                        m1 /= C; m2 /= C;
                        for (int c = 0; c < C; ++c) {
                            double dxh = g(r, c) * G(0, c);
                            dx(r, c) = (dxh - m1 - xh(r, c) * m2) * inv(r, 0);
                        }
                    }
                    accum(n.a, emap(dx));
                }
                break;
            }
            case Node::kGatherRows: {
                const Matrix& T = store_->nodes[n.a].val;
                Matrix d(T.rows(), T.cols());
                for (size_t i = 0; i < n.ids.size(); ++i)
                    for (int c = 0; c < T.cols(); ++c)
                        d(n.ids[i], c) += g(static_cast<int>(i), c);
                accum(n.a, emap(d));
                break;
            }
            case Node::kAddToRow: {
                accum(n.a, emap(g));
                if (store_->nodes[n.b].needs) {
                    Matrix dv(1, g.cols());
                    for (int c = 0; c < g.cols(); ++c) dv(0, c) = g(n.irow, c);
                    accum(n.b, emap(dv));
                }
                break;
            }
            case Node::kSumAll: {
                const Matrix& A = store_->nodes[n.a].val;
                Matrix d(A.rows(), A.cols());
                emap(d).setConstant(g(0, 0));
                accum(n.a, emap(d));
                break;
            }
            case Node::kMeanAll: {
                const Matrix& A = store_->nodes[n.a].val;
                Matrix d(A.rows(), A.cols());
                emap(d).setConstant(g(0, 0) * n.scalar);
                accum(n.a, emap(d));
                break;
            }
            case Node::kAttention: {
                const Matrix& Q = store_->nodes[n.a].val;
                const Matrix& K = store_->nodes[n.b].val;
                const Matrix& V = store_->nodes[n.irow].val;
                const int hd = Q.cols() / n.heads;
                const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
                Matrix dQ(Q.rows(), Q.cols()), dK(Q.rows(), Q.cols()), dV(Q.rows(), Q.cols());
                size_t pi = 0;
                for (const auto& [b, len] : n.spans) {
                    for (int h = 0; h < n.heads; ++h, ++pi) {
                        const Matrix& P = n.probs[pi];
                        ECMap km(K.data(), K.rows(), K.cols());
                        ECMap qm(Q.data(), Q.rows(), Q.cols());
                        ECMap vm(V.data(), V.rows(), V.cols());
                        ECMap gm(g.data(), g.rows(), g.cols());
                        auto Kb = km.block(b, h * hd, len, hd);
                        auto Qb = qm.block(b, h * hd, len, hd);
                        auto Vb = vm.block(b, h * hd, len, hd);
                        auto Gb = gm.block(b, h * hd, len, hd);
                        EMat dP = Gb * Vb.transpose();
                        emap(dV).block(b, h * hd, len, hd).noalias() +=
                            emap(P).transpose() * Gb;
                        // softmax-rows backward on dP, masked entries have P=0
                        EMat dS(len, len);
                        for (int i = 0; i < len; ++i) {
                            double dot = 0;
                            for (int j = 0; j < len; ++j) dot += dP(i, j) * P(i, j);
                            for (int j = 0; j < len; ++j)
                                dS(i, j) = P(i, j) * (dP(i, j) - dot);
                        }
                        emap(dQ).block(b, h * hd, len, hd).noalias() +=
                            dS * Kb * att_scale;
                        emap(dK).block(b, h * hd, len, hd).noalias() +=
                            dS.transpose() * Qb * att_scale;
                    }
                }
                accum(n.a, emap(dQ));
                accum(n.b, emap(dK));
                accum(n.irow, emap(dV));
                break;
            }
            case Node::kCrossEntropy: {
                const Matrix& L = store_->nodes[n.a].val;
                Matrix d(L.rows(), L.cols());
                double gs = g(0, 0);
                for (size_t i = 0; i < n.ids.size(); ++i) {
                    int r = n.ids[i], t = n.targets[i];
                    for (int c = 0; c < L.cols(); ++c)
                        d(r, c) += gs * n.aux(static_cast<int>(i), c);
                    d(r, t) -= gs;
                }
                accum(n.a, emap(d));
                break;
            }
            case Node::kKlToRef: {
                const Matrix& L = store_->nodes[n.a].val;
                Matrix d(L.rows(), L.cols());
                double gs = g(0, 0);
                for (size_t i = 0; i < n.ids.size(); ++i) {
                    int r = n.ids[i];
                    double kl = 0;
                    for (int c = 0; c < L.cols(); ++c)
                        kl += n.aux(static_cast<int>(i), c) * n.aux2(static_cast<int>(i), c);
                    for (int c = 0; c < L.cols(); ++c)
                        d(r, c) += gs * n.aux(static_cast<int>(i), c) *
                                   (n.aux2(static_cast<int>(i), c) - kl);
                }
                accum(n.a, emap(d));
                break;
            }
        }
    }
    return out;
}

}  // namespace unierase
