/*
 * Native kernels for the large-frame inference path.
 *
 * Three stages dominate fusion latency at detector scale (tens of thousands
 * of 3D candidates): projecting candidate boxes to image hulls, joining the
 * hulls against the 2D candidate list to assemble the sparse joint tensor,
 * and running the per-element fusion MLP.  Each stage has a pure-Python
 * twin in the package; these implementations only trade generality for
 * throughput and are cross-validated against the Python versions in tests.
 *
 * All functions operate on caller-allocated contiguous buffers (numpy
 * arrays); dtype discipline is enforced by the Python wrapper in fastpath.py.
 * Hot loops carry AVX-512 variants with portable scalar fallbacks chosen at
 * compile time.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>

#include <math.h>
#include <stdint.h>
#include <string.h>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

/* ------------------------------------------------------------------ */
/* Buffer helpers                                                      */
/* ------------------------------------------------------------------ */

static int get_ro(PyObject *obj, Py_buffer *view, const char *name)
{
    if (PyObject_GetBuffer(obj, view, PyBUF_CONTIG_RO) != 0) {
        PyErr_Format(PyExc_TypeError, "%s: expected a C-contiguous buffer", name);
        return -1;
    }
    return 0;
}

static int get_rw(PyObject *obj, Py_buffer *view, const char *name)
{
    if (PyObject_GetBuffer(obj, view, PyBUF_CONTIG) != 0) {
        PyErr_Format(PyExc_TypeError, "%s: expected a writable C-contiguous buffer", name);
        return -1;
    }
    return 0;
}

#if defined(__AVX512F__)
/* Min/max over the lanes selected by m; masked-out lanes are replaced by
 * sentinels far outside any pixel coordinate. */
static inline double reduce_min_masked(__mmask8 m, __m512d v)
{
    v = _mm512_mask_blend_pd(m, _mm512_set1_pd(1e300), v);
    __m256d a = _mm256_min_pd(_mm512_castpd512_pd256(v), _mm512_extractf64x4_pd(v, 1));
    __m128d b = _mm_min_pd(_mm256_castpd256_pd128(a), _mm256_extractf128_pd(a, 1));
    b = _mm_min_sd(b, _mm_unpackhi_pd(b, b));
    return _mm_cvtsd_f64(b);
}

static inline double reduce_max_masked(__mmask8 m, __m512d v)
{
    v = _mm512_mask_blend_pd(m, _mm512_set1_pd(-1e300), v);
    __m256d a = _mm256_max_pd(_mm512_castpd512_pd256(v), _mm512_extractf64x4_pd(v, 1));
    __m128d b = _mm_max_pd(_mm256_castpd256_pd128(a), _mm256_extractf128_pd(a, 1));
    b = _mm_max_sd(b, _mm_unpackhi_pd(b, b));
    return _mm_cvtsd_f64(b);
}
#endif

/* ------------------------------------------------------------------ */
/* project_hulls                                                       */
/* ------------------------------------------------------------------ */

/*
 * Project n oriented 3D boxes (rows [h,w,l,x,y,z,theta]) through the 3x4
 * combined LiDAR->image matrix M and write the axis-aligned hull of the
 * in-front corners, optionally clipped to [0,W]x[0,H].  valid[j] = 0 when
 * every corner is behind the camera or the clipped hull is degenerate.
 *
 * The trig pair is memoized across consecutive boxes because anchor-grid
 * workloads repeat a handful of yaw values; the AVX-512 variant maps the 8
 * corners of one box onto the 8 double lanes.
 */

/* Footprint sign patterns: (+l,+w), (-l,+w), (-l,-w), (+l,-w); bottom then top. */
static const double SIGN_L[8] = {1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0};
static const double SIGN_W[8] = {1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0};
static const double SIGN_H[8] = {-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0};

static void project_hulls_impl(Py_ssize_t n, const double *boxes, const double *M,
                               double width, double height, int clip,
                               double d_max, double *hulls, uint8_t *valid,
                               double *dnorm)
{
    /* The corner offsets from the box center -- and their images under the
     * linear part of M -- depend only on (h, w, l, theta), which anchor
     * grids repeat for long runs; memoize them so the per-box work is three
     * scalar dot products for the center plus the perspective divide. */
    double memo_h = -1.0, memo_w = -1.0, memo_l = -1.0, memo_t = NAN;
#if defined(__AVX512F__)
    const __m512d sl = _mm512_loadu_pd(SIGN_L);
    const __m512d sw = _mm512_loadu_pd(SIGN_W);
    const __m512d sh = _mm512_loadu_pd(SIGN_H);
    const __m512d vzero = _mm512_setzero_pd();
    const __m512d vone = _mm512_set1_pd(1.0);
    __m512d poff_u = vzero, poff_v = vzero, poff_w = vzero;
#else
    double poff_u[8], poff_v[8], poff_w[8];
#endif

    for (Py_ssize_t j = 0; j < n; ++j) {
        const double *row = boxes + 7 * j;
        double x = row[3], y = row[4], z = row[5];
        double d = sqrt(x * x + y * y) / d_max;
        dnorm[j] = d < 1.0 ? d : 1.0;
        if (row[0] != memo_h || row[1] != memo_w || row[2] != memo_l
                || row[6] != memo_t) {
            memo_h = row[0];
            memo_w = row[1];
            memo_l = row[2];
            memo_t = row[6];
            double hh = memo_h * 0.5, hw = memo_w * 0.5, hl = memo_l * 0.5;
            double ct = cos(memo_t), st = sin(memo_t);
#if defined(__AVX512F__)
            __m512d dl = _mm512_mul_pd(sl, _mm512_set1_pd(hl));
            __m512d dw = _mm512_mul_pd(sw, _mm512_set1_pd(hw));
            __m512d ox = _mm512_fnmadd_pd(_mm512_set1_pd(st), dw,
                         _mm512_mul_pd(_mm512_set1_pd(ct), dl));
            __m512d oy = _mm512_fmadd_pd(_mm512_set1_pd(ct), dw,
                         _mm512_mul_pd(_mm512_set1_pd(st), dl));
            __m512d oz = _mm512_mul_pd(sh, _mm512_set1_pd(hh));
            poff_u = _mm512_fmadd_pd(_mm512_set1_pd(M[0]), ox,
                     _mm512_fmadd_pd(_mm512_set1_pd(M[1]), oy,
                     _mm512_mul_pd(_mm512_set1_pd(M[2]), oz)));
            poff_v = _mm512_fmadd_pd(_mm512_set1_pd(M[4]), ox,
                     _mm512_fmadd_pd(_mm512_set1_pd(M[5]), oy,
                     _mm512_mul_pd(_mm512_set1_pd(M[6]), oz)));
            poff_w = _mm512_fmadd_pd(_mm512_set1_pd(M[8]), ox,
                     _mm512_fmadd_pd(_mm512_set1_pd(M[9]), oy,
                     _mm512_mul_pd(_mm512_set1_pd(M[10]), oz)));
#else
            for (int c = 0; c < 8; ++c) {
                double ox = ct * (SIGN_L[c] * hl) - st * (SIGN_W[c] * hw);
                double oy = st * (SIGN_L[c] * hl) + ct * (SIGN_W[c] * hw);
                double oz = SIGN_H[c] * hh;
                poff_u[c] = M[0] * ox + M[1] * oy + M[2] * oz;
                poff_v[c] = M[4] * ox + M[5] * oy + M[6] * oz;
                poff_w[c] = M[8] * ox + M[9] * oy + M[10] * oz;
            }
#endif
        }
        double cu = M[0] * x + M[1] * y + M[2] * z + M[3];
        double cv = M[4] * x + M[5] * y + M[6] * z + M[7];
        double cw = M[8] * x + M[9] * y + M[10] * z + M[11];
        double umin, umax, vmin, vmax;
        int front;
#if defined(__AVX512F__)
        __m512d pu = _mm512_add_pd(poff_u, _mm512_set1_pd(cu));
        __m512d pv = _mm512_add_pd(poff_v, _mm512_set1_pd(cv));
        __m512d pw = _mm512_add_pd(poff_w, _mm512_set1_pd(cw));
        __mmask8 fmask = _mm512_cmp_pd_mask(pw, vzero, _CMP_GT_OQ);
        front = fmask != 0;
        if (front) {
            __m512d inv = _mm512_div_pd(vone, pw);
            __m512d uu = _mm512_mul_pd(pu, inv);
            __m512d vv = _mm512_mul_pd(pv, inv);
            umin = reduce_min_masked(fmask, uu);
            umax = reduce_max_masked(fmask, uu);
            vmin = reduce_min_masked(fmask, vv);
            vmax = reduce_max_masked(fmask, vv);
        } else {
            umin = vmin = 1e300;
            umax = vmax = -1e300;
        }
#else
        umin = vmin = 1e300;
        umax = vmax = -1e300;
        front = 0;
        for (int c = 0; c < 8; ++c) {
            double pu = cu + poff_u[c];
            double pv = cv + poff_v[c];
            double pw = cw + poff_w[c];
            if (pw > 0.0) {
                double inv = 1.0 / pw;
                double u = pu * inv, v = pv * inv;
                if (u < umin) umin = u;
                if (u > umax) umax = u;
                if (v < vmin) vmin = v;
                if (v > vmax) vmax = v;
                front = 1;
            }
        }
#endif
        if (clip) {
            if (umin < 0.0) umin = 0.0;
            if (vmin < 0.0) vmin = 0.0;
            if (umax > width) umax = width;
            if (vmax > height) vmax = height;
        }
        if (front && umin < umax && vmin < vmax) {
            hulls[4 * j + 0] = umin;
            hulls[4 * j + 1] = vmin;
            hulls[4 * j + 2] = umax;
            hulls[4 * j + 3] = vmax;
            valid[j] = 1;
        } else {
            hulls[4 * j + 0] = hulls[4 * j + 1] = 0.0;
            hulls[4 * j + 2] = hulls[4 * j + 3] = 0.0;
            valid[j] = 0;
        }
    }
}

static PyObject *py_project_hulls(PyObject *self, PyObject *args)
{
    PyObject *boxes_o, *m_o, *hulls_o, *valid_o, *dnorm_o;
    double width, height, d_max;
    int clip;
    if (!PyArg_ParseTuple(args, "OOddpdOOO", &boxes_o, &m_o, &width, &height,
                          &clip, &d_max, &hulls_o, &valid_o, &dnorm_o))
        return NULL;

    Py_buffer boxes_b, m_b, hulls_b, valid_b, dnorm_b;
    if (get_ro(boxes_o, &boxes_b, "boxes") != 0) return NULL;
    if (get_ro(m_o, &m_b, "M") != 0) { PyBuffer_Release(&boxes_b); return NULL; }
    if (get_rw(hulls_o, &hulls_b, "hulls") != 0) {
        PyBuffer_Release(&boxes_b); PyBuffer_Release(&m_b); return NULL;
    }
    if (get_rw(valid_o, &valid_b, "valid") != 0) {
        PyBuffer_Release(&boxes_b); PyBuffer_Release(&m_b);
        PyBuffer_Release(&hulls_b); return NULL;
    }
    if (get_rw(dnorm_o, &dnorm_b, "dnorm") != 0) {
        PyBuffer_Release(&boxes_b); PyBuffer_Release(&m_b);
        PyBuffer_Release(&hulls_b); PyBuffer_Release(&valid_b); return NULL;
    }

    project_hulls_impl(boxes_b.len / (7 * (Py_ssize_t)sizeof(double)),
                       (const double *)boxes_b.buf, (const double *)m_b.buf,
                       width, height, clip, d_max,
                       (double *)hulls_b.buf, (uint8_t *)valid_b.buf,
                       (double *)dnorm_b.buf);

    PyBuffer_Release(&boxes_b);
    PyBuffer_Release(&m_b);
    PyBuffer_Release(&hulls_b);
    PyBuffer_Release(&valid_b);
    PyBuffer_Release(&dnorm_b);
    Py_RETURN_NONE;
}

/* ------------------------------------------------------------------ */
/* sparse_join                                                         */
/* ------------------------------------------------------------------ */

/*
 * Join n candidate hulls against k 2D boxes sorted by x1 and passed as
 * separate coordinate columns (x1, y1, x2, y2) plus precomputed areas.
 * A 2D box i can overlap hull j only when x1[i] < hx2[j] and x2[i] > hx1[j];
 * since the columns are x1-sorted and widths are bounded by max_width, the
 * candidate range is [lower_bound(hx1 - max_width), lower_bound(hx2)).
 * Elements come out grouped by j (ascending), candidates within a j sorted
 * by original 2D index; unmatched or invalid j's contribute one sentinel
 * element.
 *
 * The join runs in a single pass: starts[n + 1] is always filled, and the
 * channel streams (float32) plus element 2D indices (int32, -1 for
 * sentinels) are written as long as they fit within the caller's capacity.
 * The return value is the true element total p; when p > cap the caller
 * reallocates to p and calls again.
 */

static Py_ssize_t lower_bound(const double *arr, Py_ssize_t len, double key)
{
    Py_ssize_t lo = 0, hi = len;
    while (lo < hi) {
        Py_ssize_t mid = (lo + hi) / 2;
        if (arr[mid] < key) lo = mid + 1; else hi = mid;
    }
    return lo;
}

/* First index with arr[idx] >= key, starting from a hint.  Successive
 * hulls from grid-ordered candidates sweep the image smoothly, so the
 * previous bound is usually a few steps away; a short walk covers that
 * case and anything farther falls back to binary search. */
static inline Py_ssize_t advance(const double *arr, Py_ssize_t k,
                                 Py_ssize_t pos, double key)
{
    int steps = 16;
    while (pos > 0 && arr[pos - 1] >= key) {
        if (--steps == 0) return lower_bound(arr, pos, key);
        --pos;
    }
    while (pos < k && arr[pos] < key) {
        if (--steps == 0) return pos + lower_bound(arr + pos, k - pos, key);
        ++pos;
    }
    return pos;
}

/* Scan one hull's x-window, collecting (sorted-order index, iou) for every
 * box whose IoU with the hull exceeds min_iou.  The scratch arrays must
 * hold at least hi - lo entries; returns the match count. */
static inline int64_t scan_window(double hx1, double hy1, double hx2, double hy2,
                                  double area_h,
                                  const double *bx1, const double *by1,
                                  const double *bx2, const double *by2,
                                  const double *barea,
                                  Py_ssize_t lo, Py_ssize_t hi, double min_iou,
                                  int64_t *match_idx, double *match_iou)
{
    int64_t cnt = 0;
#if defined(__AVX512F__)
    const __m512d vhx1 = _mm512_set1_pd(hx1), vhy1 = _mm512_set1_pd(hy1);
    const __m512d vhx2 = _mm512_set1_pd(hx2), vhy2 = _mm512_set1_pd(hy2);
    const __m512d varea = _mm512_set1_pd(area_h);
    const __m512d vthr = _mm512_set1_pd(min_iou);
    const __m512d vzero = _mm512_setzero_pd();
    const __m512i iota = _mm512_set_epi64(7, 6, 5, 4, 3, 2, 1, 0);
    for (Py_ssize_t i = lo; i < hi; i += 8) {
        __mmask8 tail = (hi - i >= 8) ? (__mmask8)0xFF
                                      : (__mmask8)((1u << (hi - i)) - 1u);
        __m512d x1 = _mm512_maskz_loadu_pd(tail, bx1 + i);
        __m512d y1 = _mm512_maskz_loadu_pd(tail, by1 + i);
        __m512d x2 = _mm512_maskz_loadu_pd(tail, bx2 + i);
        __m512d y2 = _mm512_maskz_loadu_pd(tail, by2 + i);
        __m512d iw = _mm512_sub_pd(_mm512_min_pd(vhx2, x2), _mm512_max_pd(vhx1, x1));
        __m512d ih = _mm512_sub_pd(_mm512_min_pd(vhy2, y2), _mm512_max_pd(vhy1, y1));
        __mmask8 m = _mm512_cmp_pd_mask(iw, vzero, _CMP_GT_OQ)
                   & _mm512_cmp_pd_mask(ih, vzero, _CMP_GT_OQ) & tail;
        if (!m) continue;
        __m512d ba = _mm512_maskz_loadu_pd(tail, barea + i);
        __m512d inter = _mm512_mul_pd(iw, ih);
        __m512d den = _mm512_sub_pd(_mm512_add_pd(varea, ba), inter);
        __m512d iou = _mm512_div_pd(inter, den);
        m = _mm512_mask_cmp_pd_mask(m, iou, vthr, _CMP_GT_OQ);
        if (!m) continue;
        _mm512_mask_compressstoreu_pd(match_iou + cnt, m, iou);
        __m512i idx = _mm512_add_epi64(_mm512_set1_epi64((long long)i), iota);
        _mm512_mask_compressstoreu_epi64(match_idx + cnt, m, idx);
        cnt += _mm_popcnt_u32((unsigned)m);
    }
#else
    for (Py_ssize_t i = lo; i < hi; ++i) {
        double iw = (hx2 < bx2[i] ? hx2 : bx2[i]) - (hx1 > bx1[i] ? hx1 : bx1[i]);
        double ih = (hy2 < by2[i] ? hy2 : by2[i]) - (hy1 > by1[i] ? hy1 : by1[i]);
        if (iw <= 0.0 || ih <= 0.0) continue;
        double inter = iw * ih;
        double iou = inter / (area_h + barea[i] - inter);
        if (iou > min_iou) {
            match_idx[cnt] = (int64_t)i;
            match_iou[cnt] = iou;
            ++cnt;
        }
    }
#endif
    return cnt;
}

enum { STACK_CAND = 256 };

static PyObject *py_sparse_join(PyObject *self, PyObject *args)
{
    PyObject *objs[17];
    double max_width, min_iou;
    Py_ssize_t cap;
    if (!PyArg_ParseTuple(args, "OOOOOOOOOOOddnOOOOOO", &objs[0], &objs[1],
                          &objs[2], &objs[3], &objs[4], &objs[5], &objs[6],
                          &objs[7], &objs[8], &objs[9], &objs[10],
                          &max_width, &min_iou, &cap, &objs[11], &objs[12],
                          &objs[13], &objs[14], &objs[15], &objs[16]))
        return NULL;

    const char *names[17] = {"hulls", "valid", "s3d", "dnorm", "bx1", "by1",
                             "bx2", "by2", "barea", "s2d", "orig_idx",
                             "starts", "c_iou", "c_s2d", "c_s3d", "c_dn",
                             "el_i"};
    Py_buffer bufs[17];
    int nheld = 0;
    for (int idx = 0; idx < 17; ++idx) {
        int rc = (idx < 11) ? get_ro(objs[idx], &bufs[idx], names[idx])
                            : get_rw(objs[idx], &bufs[idx], names[idx]);
        if (rc != 0) {
            for (int r = 0; r < nheld; ++r) PyBuffer_Release(&bufs[r]);
            return NULL;
        }
        ++nheld;
    }

    const double *hulls = (const double *)bufs[0].buf;
    const uint8_t *valid = (const uint8_t *)bufs[1].buf;
    const double *s3d = (const double *)bufs[2].buf;
    const double *dnorm = (const double *)bufs[3].buf;
    const double *bx1 = (const double *)bufs[4].buf;
    const double *by1 = (const double *)bufs[5].buf;
    const double *bx2 = (const double *)bufs[6].buf;
    const double *by2 = (const double *)bufs[7].buf;
    const double *barea = (const double *)bufs[8].buf;
    const double *s2d = (const double *)bufs[9].buf;
    const int64_t *orig_idx = (const int64_t *)bufs[10].buf;
    int64_t *starts = (int64_t *)bufs[11].buf;
    float *c_iou = (float *)bufs[12].buf;
    float *c_s2d = (float *)bufs[13].buf;
    float *c_s3d = (float *)bufs[14].buf;
    float *c_dn = (float *)bufs[15].buf;
    int32_t *el_i = (int32_t *)bufs[16].buf;
    Py_ssize_t n = bufs[1].len;
    Py_ssize_t k = bufs[4].len / (Py_ssize_t)sizeof(double);

    int64_t idx_small[STACK_CAND];
    double iou_small[STACK_CAND];
    int64_t *idx_stack = idx_small;
    double *iou_stack = iou_small;
    if (k > STACK_CAND) {
        idx_stack = (int64_t *)PyMem_Malloc((size_t)k * sizeof(int64_t));
        iou_stack = (double *)PyMem_Malloc((size_t)k * sizeof(double));
    }

    int64_t total = 0;
    Py_ssize_t lo = 0, hi = 0;
    for (Py_ssize_t j = 0; j < n; ++j) {
        starts[j] = total;
        int64_t cnt = 0;
        if (valid[j]) {
            const double *hull = hulls + 4 * j;
            double area_h = (hull[2] - hull[0]) * (hull[3] - hull[1]);
            lo = advance(bx1, k, lo, hull[0] - max_width);
            hi = advance(bx1, k, hi, hull[2]);
            cnt = scan_window(hull[0], hull[1], hull[2], hull[3], area_h,
                              bx1, by1, bx2, by2, barea, lo, hi, min_iou,
                              idx_stack, iou_stack);
        }
        int64_t cnt_eff = (cnt > 0) ? cnt : 1; /* sentinel for unmatched j */
        if (total + cnt_eff <= cap) {
            int64_t pos = total;
            float fs3d = (float)s3d[j], fdn = (float)dnorm[j];
            if (cnt == 0) {
                c_iou[pos] = -1.0f;
                c_s2d[pos] = -1.0f;
                c_s3d[pos] = fs3d;
                c_dn[pos] = fdn;
                el_i[pos] = -1;
            } else {
                /* Map sorted-order matches to original 2D indices, then
                 * insertion sort ascending (indices are unique). */
                for (int64_t c = 0; c < cnt; ++c)
                    idx_stack[c] = orig_idx[idx_stack[c]];
                for (int64_t c = 1; c < cnt; ++c) {
                    int64_t oi = idx_stack[c];
                    double iv = iou_stack[c];
                    int64_t ins = c;
                    while (ins > 0 && idx_stack[ins - 1] > oi) {
                        idx_stack[ins] = idx_stack[ins - 1];
                        iou_stack[ins] = iou_stack[ins - 1];
                        --ins;
                    }
                    idx_stack[ins] = oi;
                    iou_stack[ins] = iv;
                }
                for (int64_t c = 0; c < cnt; ++c) {
                    c_iou[pos + c] = (float)iou_stack[c];
                    c_s2d[pos + c] = (float)s2d[idx_stack[c]];
                    c_s3d[pos + c] = fs3d;
                    c_dn[pos + c] = fdn;
                    el_i[pos + c] = (int32_t)idx_stack[c];
                }
            }
        }
        total += cnt_eff;
    }
    starts[n] = total;

    if (idx_stack != idx_small) {
        PyMem_Free(idx_stack);
        PyMem_Free(iou_stack);
    }
    for (int r = 0; r < 17; ++r) PyBuffer_Release(&bufs[r]);
    return PyLong_FromLongLong((long long)total);
}

/* ------------------------------------------------------------------ */
/* fused_forward                                                       */
/* ------------------------------------------------------------------ */

/*
 * Per-element MLP 4 -> 18 -> 36 -> 36 -> 1 with ReLU between hidden
 * layers, identical to running 1x1 convolutions over the element list.
 * Weights are row-major (input, output).  The AVX-512 variant processes 16
 * elements per block with layer outputs held in registers, split in halves
 * of 18 accumulators to fit the register file.
 */

static void fused_forward_scalar(Py_ssize_t n, const float *c0, const float *c1,
                                 const float *c2, const float *c3,
                                 const float *W1, const float *b1,
                                 const float *W2, const float *b2,
                                 const float *W3, const float *b3,
                                 const float *W4, float b4, float *out)
{
    for (Py_ssize_t s = 0; s < n; ++s) {
        float xs[4] = {c0[s], c1[s], c2[s], c3[s]};
        float t1[18], t2[36], t3[36];
        for (int o = 0; o < 18; ++o) {
            float v = b1[o];
            for (int i = 0; i < 4; ++i) v += xs[i] * W1[i * 18 + o];
            t1[o] = v > 0.f ? v : 0.f;
        }
        for (int o = 0; o < 36; ++o) {
            float v = b2[o];
            for (int i = 0; i < 18; ++i) v += t1[i] * W2[i * 36 + o];
            t2[o] = v > 0.f ? v : 0.f;
        }
        for (int o = 0; o < 36; ++o) {
            float v = b3[o];
            for (int i = 0; i < 36; ++i) v += t2[i] * W3[i * 36 + o];
            t3[o] = v > 0.f ? v : 0.f;
        }
        float v = b4;
        for (int i = 0; i < 36; ++i) v += t3[i] * W4[i];
        out[s] = v;
    }
}

#if defined(__AVX512F__)
/* One hidden layer over a block of 16 elements: activations live in L1
 * stack buffers ([unit][16] layout) and outputs are produced 9 accumulators
 * at a time so everything stays in registers. */
static inline void dense_relu_block(const float *restrict in, int fan_in,
                                    const float *restrict W, const float *restrict b,
                                    int fan_out, float *restrict outbuf)
{
    const __m512 zero = _mm512_setzero_ps();
    for (int ob = 0; ob < fan_out; ob += 9) {
        __m512 acc[9];
        for (int o = 0; o < 9; ++o) acc[o] = _mm512_set1_ps(b[ob + o]);
        for (int i = 0; i < fan_in; ++i) {
            __m512 hv = _mm512_load_ps(in + i * 16);
            const float *wrow = W + i * fan_out + ob;
            for (int o = 0; o < 9; ++o)
                acc[o] = _mm512_fmadd_ps(hv, _mm512_set1_ps(wrow[o]), acc[o]);
        }
        for (int o = 0; o < 9; ++o)
            _mm512_store_ps(outbuf + (ob + o) * 16, _mm512_max_ps(acc[o], zero));
    }
}

static void fused_forward_avx512(Py_ssize_t n, const float *restrict c0,
                                 const float *restrict c1, const float *restrict c2,
                                 const float *restrict c3,
                                 const float *restrict W1, const float *restrict b1,
                                 const float *restrict W2, const float *restrict b2,
                                 const float *restrict W3, const float *restrict b3,
                                 const float *restrict W4, float b4,
                                 float *restrict out)
{
    Py_ssize_t nfull = (n / 16) * 16;
    const __m512 zero = _mm512_setzero_ps();
    float __attribute__((aligned(64))) h1buf[18 * 16];
    float __attribute__((aligned(64))) h2buf[36 * 16];
    float __attribute__((aligned(64))) h3buf[36 * 16];
    for (Py_ssize_t s = 0; s < nfull; s += 16) {
        __m512 x0 = _mm512_loadu_ps(c0 + s);
        __m512 x1 = _mm512_loadu_ps(c1 + s);
        __m512 x2 = _mm512_loadu_ps(c2 + s);
        __m512 x3 = _mm512_loadu_ps(c3 + s);
        for (int ob = 0; ob < 18; ob += 9) {
            __m512 acc[9];
            for (int o = 0; o < 9; ++o) acc[o] = _mm512_set1_ps(b1[ob + o]);
            for (int o = 0; o < 9; ++o) {
                acc[o] = _mm512_fmadd_ps(x0, _mm512_set1_ps(W1[0 * 18 + ob + o]), acc[o]);
                acc[o] = _mm512_fmadd_ps(x1, _mm512_set1_ps(W1[1 * 18 + ob + o]), acc[o]);
                acc[o] = _mm512_fmadd_ps(x2, _mm512_set1_ps(W1[2 * 18 + ob + o]), acc[o]);
                acc[o] = _mm512_fmadd_ps(x3, _mm512_set1_ps(W1[3 * 18 + ob + o]), acc[o]);
            }
            for (int o = 0; o < 9; ++o)
                _mm512_store_ps(h1buf + (ob + o) * 16, _mm512_max_ps(acc[o], zero));
        }
        dense_relu_block(h1buf, 18, W2, b2, 36, h2buf);
        dense_relu_block(h2buf, 36, W3, b3, 36, h3buf);
        __m512 a0 = _mm512_set1_ps(b4), a1 = zero, a2 = zero, a3 = zero;
        for (int i = 0; i < 36; i += 4) {
            a0 = _mm512_fmadd_ps(_mm512_load_ps(h3buf + (i + 0) * 16),
                                 _mm512_set1_ps(W4[i + 0]), a0);
            a1 = _mm512_fmadd_ps(_mm512_load_ps(h3buf + (i + 1) * 16),
                                 _mm512_set1_ps(W4[i + 1]), a1);
            a2 = _mm512_fmadd_ps(_mm512_load_ps(h3buf + (i + 2) * 16),
                                 _mm512_set1_ps(W4[i + 2]), a2);
            a3 = _mm512_fmadd_ps(_mm512_load_ps(h3buf + (i + 3) * 16),
                                 _mm512_set1_ps(W4[i + 3]), a3);
        }
        __m512 r = _mm512_add_ps(_mm512_add_ps(a0, a1), _mm512_add_ps(a2, a3));
        _mm512_storeu_ps(out + s, r);
    }
    if (n > nfull)
        fused_forward_scalar(n - nfull, c0 + nfull, c1 + nfull, c2 + nfull,
                             c3 + nfull, W1, b1, W2, b2, W3, b3, W4, b4,
                             out + nfull);
}
#endif

static PyObject *py_fused_forward(PyObject *self, PyObject *args)
{
    PyObject *objs[12];
    double b4;
    if (!PyArg_ParseTuple(args, "OOOOOOOOOOOdO", &objs[0], &objs[1], &objs[2],
                          &objs[3], &objs[4], &objs[5], &objs[6], &objs[7],
                          &objs[8], &objs[9], &objs[10], &b4, &objs[11]))
        return NULL;

    const char *names[12] = {"c_iou", "c_s2d", "c_s3d", "c_dn", "w1", "b1",
                             "w2", "b2", "w3", "b3", "w4", "out"};
    Py_buffer bufs[12];
    int nheld = 0;
    for (int idx = 0; idx < 12; ++idx) {
        int rc = (idx < 11) ? get_ro(objs[idx], &bufs[idx], names[idx])
                            : get_rw(objs[idx], &bufs[idx], names[idx]);
        if (rc != 0) {
            for (int r = 0; r < nheld; ++r) PyBuffer_Release(&bufs[r]);
            return NULL;
        }
        ++nheld;
    }

    Py_ssize_t n = bufs[0].len / (Py_ssize_t)sizeof(float);
#if defined(__AVX512F__)
    fused_forward_avx512(
#else
    fused_forward_scalar(
#endif
        n, (const float *)bufs[0].buf, (const float *)bufs[1].buf,
        (const float *)bufs[2].buf, (const float *)bufs[3].buf,
        (const float *)bufs[4].buf, (const float *)bufs[5].buf,
        (const float *)bufs[6].buf, (const float *)bufs[7].buf,
        (const float *)bufs[8].buf, (const float *)bufs[9].buf,
        (const float *)bufs[10].buf, (float)b4, (float *)bufs[11].buf);

    for (int r = 0; r < 12; ++r) PyBuffer_Release(&bufs[r]);
    Py_RETURN_NONE;
}

/* ------------------------------------------------------------------ */
/* segment_max                                                         */
/* ------------------------------------------------------------------ */

/* Max over each elements slice [starts[j], starts[j+1]); every slice is
 * non-empty by tensor construction. */
static PyObject *py_segment_max(PyObject *self, PyObject *args)
{
    PyObject *vals_o, *starts_o, *out_o;
    if (!PyArg_ParseTuple(args, "OOO", &vals_o, &starts_o, &out_o))
        return NULL;

    Py_buffer vals_b, starts_b, out_b;
    if (get_ro(vals_o, &vals_b, "values") != 0) return NULL;
    if (get_ro(starts_o, &starts_b, "starts") != 0) { PyBuffer_Release(&vals_b); return NULL; }
    if (get_rw(out_o, &out_b, "out") != 0) {
        PyBuffer_Release(&vals_b); PyBuffer_Release(&starts_b); return NULL;
    }

    const float *vals = (const float *)vals_b.buf;
    const int64_t *starts = (const int64_t *)starts_b.buf;
    float *out = (float *)out_b.buf;
    Py_ssize_t n = starts_b.len / (Py_ssize_t)sizeof(int64_t) - 1;

    for (Py_ssize_t j = 0; j < n; ++j) {
        float best = vals[starts[j]];
        for (int64_t e = starts[j] + 1; e < starts[j + 1]; ++e)
            if (vals[e] > best) best = vals[e];
        out[j] = best;
    }

    PyBuffer_Release(&vals_b);
    PyBuffer_Release(&starts_b);
    PyBuffer_Release(&out_b);
    Py_RETURN_NONE;
}

/* ------------------------------------------------------------------ */
/* Module scaffolding                                                  */
/* ------------------------------------------------------------------ */

static PyMethodDef kernel_methods[] = {
    {"project_hulls", py_project_hulls, METH_VARARGS,
     "project_hulls(boxes, M, width, height, clip, d_max, "
     "hulls_out, valid_out, dnorm_out)"},
    {"sparse_join", py_sparse_join, METH_VARARGS,
     "sparse_join(hulls, valid, s3d, dnorm, bx1, by1, bx2, by2, barea, "
     "s2d, orig_idx, max_width, min_iou, cap, starts, c_iou, c_s2d, c_s3d, "
     "c_dn, el_i) -> p (re-call with larger stream buffers when p > cap)"},
    {"fused_forward", py_fused_forward, METH_VARARGS,
     "fused_forward(c_iou, c_s2d, c_s3d, c_dn, w1, b1, w2, b2, w3, b3, w4, b4, out)"},
    {"segment_max", py_segment_max, METH_VARARGS,
     "segment_max(values, starts, out)"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef kernels_module = {
    PyModuleDef_HEAD_INIT, "_kernels",
    "Native acceleration kernels for latefusion's inference path.",
    -1, kernel_methods,
};

PyMODINIT_FUNC PyInit__kernels(void)
{
    return PyModule_Create(&kernels_module);
}
